//! Seeded synthetic intelligibility benchmark.
//!
//! Each clip is an amplitude-modulated harmonic complex in white noise.
//! Its ground-truth score is a logistic function of SNR shifted by the
//! listener's mean hearing loss. All constants here are arbitrary and only
//! make the task learnable and monotone.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{Clip, DatasetInfo, ListenerGroup, Manifest, AUDIOGRAM_HZ};
use crate::error::{Error, Result};
use crate::signal::{write_wav, Waveform, SAMPLE_RATE};

pub const PSYCHOMETRIC_SLOPE: f64 = 0.25;
pub const PSYCHOMETRIC_MIDPOINT_DB: f64 = 2.0;
pub const AUDIOGRAM_WEIGHT: f64 = 0.25;

/// `100 / (1 + exp(-0.25 · (snr - 0.25·mean(audiogram) - 2)))`.
pub fn psychometric_score(snr_db: f64, audiogram: &[f64]) -> f64 {
    let mean = audiogram.iter().sum::<f64>() / audiogram.len().max(1) as f64;
    let x = snr_db - AUDIOGRAM_WEIGHT * mean - PSYCHOMETRIC_MIDPOINT_DB;
    100.0 / (1.0 + (-PSYCHOMETRIC_SLOPE * x).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_listeners: usize,
    pub clips_per_listener: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_listeners: 15,
            clips_per_listener: 167,
            seed: 2024,
            duration_s: 1.0,
            snr_min_db: -15.0,
            snr_max_db: 25.0,
        }
    }
}

/// A clip before it is written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub noisy: Waveform,
    pub clean: Waveform,
    pub snr_db: f64,
    pub level_db: f64,
}

pub fn listener_id(i: usize) -> String {
    format!("L{:02}", i + 1)
}

/// Flat-to-sloping audiogram in 5 dB steps, nondecreasing, within 0–80 dB HL.
pub fn synth_audiogram(rng: &mut impl Rng) -> Vec<f64> {
    let base: f64 = rng.random_range(0.0..35.0);
    let slope: f64 = rng.random_range(0.0..9.0);
    (0..AUDIOGRAM_HZ.len())
        .map(|i| ((base + slope * i as f64) / 5.0).round().clamp(0.0, 16.0) * 5.0)
        .collect()
}

fn unit_rms(x: &mut [f64]) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
}

/// One stereo clip at `snr_db`: identical carrier in both ears, independent
/// noise per ear, random presentation level applied to noisy and clean alike.
pub fn synth_clip(rng: &mut impl Rng, snr_db: f64, duration_s: f64) -> Result<SynthClip> {
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let sr = SAMPLE_RATE as f64;
    let f0: f64 = rng.random_range(90.0..240.0);
    let am_rate: f64 = rng.random_range(3.0..6.0);
    let am_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let tilt: f64 = rng.random_range(0.6..1.4);
    let harmonics: Vec<(f64, f64, f64)> = (1..)
        .map(|k| k as f64)
        .take_while(|k| k * f0 < 4000.0)
        .map(|k| (k * f0, k.powf(-tilt), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let ramp = (0.02 * sr) as usize;
    let mut clean: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.5 * (1.0 - (2.0 * PI * am_rate * t + am_phase).cos());
            let edge = (i.min(n - 1 - i) as f64 / ramp as f64).min(1.0);
            let carrier: f64 = harmonics.iter().map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum();
            env * edge * carrier
        })
        .collect();
    unit_rms(&mut clean);
    let noise_gain = 10f64.powf(-snr_db / 20.0);
    let ears: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let mut noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            unit_rms(&mut noise);
            clean.iter().zip(&noise).map(|(s, v)| s + noise_gain * v).collect()
        })
        .collect();
    let peak = ears.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let level_db: f64 = rng.random_range(-12.0..-1.0);
    let k = 10f64.powf(level_db / 20.0) / peak;
    let scale = |x: &[f64]| x.iter().map(|v| v * k).collect::<Vec<_>>();
    Ok(SynthClip {
        noisy: Waveform::stereo(scale(&ears[0]), scale(&ears[1]), SAMPLE_RATE)?,
        clean: Waveform::mono(scale(&clean), SAMPLE_RATE)?,
        snr_db,
        level_db,
    })
}

/// Generate the benchmark into `out_dir` (`audio/*.wav` and
/// `manifest.jsonl`) and return the manifest.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.n_listeners == 0 || cfg.clips_per_listener == 0 || !(cfg.duration_s >= 0.05) {
        return Err(Error::config("synthetic corpus needs listeners, clips and duration >= 0.05 s"));
    }
    if !(cfg.snr_min_db <= cfg.snr_max_db) {
        return Err(Error::config("snr_min_db exceeds snr_max_db"));
    }
    let audio = out_dir.join("audio");
    std::fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clips = Vec::with_capacity(cfg.n_listeners * cfg.clips_per_listener);
    for l in 0..cfg.n_listeners {
        let listener = listener_id(l);
        let audiogram = synth_audiogram(&mut rng);
        for c in 0..cfg.clips_per_listener {
            let id = format!("{listener}_{c:04}");
            let snr = if cfg.snr_min_db == cfg.snr_max_db {
                cfg.snr_min_db
            } else {
                rng.random_range(cfg.snr_min_db..cfg.snr_max_db)
            };
            let clip = synth_clip(&mut rng, snr, cfg.duration_s)?;
            let signal = audio.join(format!("{id}.wav"));
            let clean = audio.join(format!("{id}_clean.wav"));
            write_wav(&signal, &clip.noisy)?;
            write_wav(&clean, &clip.clean)?;
            let mut meta = BTreeMap::new();
            meta.insert("snr_db".to_string(), serde_json::json!(snr));
            meta.insert("level_db".to_string(), serde_json::json!(clip.level_db));
            clips.push(Clip {
                clip_id: id,
                listener_id: listener.clone(),
                signal: Some(signal),
                clean: Some(clean),
                enhanced: BTreeMap::new(),
                noisy_features: vec![],
                enhanced_features: BTreeMap::new(),
                audiogram: audiogram.clone(),
                score: psychometric_score(snr, &audiogram),
                listener_group: ListenerGroup::HI,
                sources: None,
                meta,
            });
        }
    }
    let m = Manifest::from_clips(
        DatasetInfo {
            name: format!("synthetic-{}", cfg.seed),
            sample_rate: SAMPLE_RATE,
        },
        clips,
    )?;
    m.save(&out_dir.join("manifest.jsonl"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_anchor_values() {
        let zero = [0.0; 6];
        let s = psychometric_score(30.0, &zero);
        assert!((s - 100.0 / (1.0 + (-7.0f64).exp())).abs() < 1e-12);
        assert!((s - 99.909).abs() < 1e-3);
        let a = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0];
        assert_eq!(psychometric_score(2.0 + 0.25 * 35.0, &a), 50.0);
    }

    #[test]
    fn clip_hits_requested_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = synth_clip(&mut rng, 5.0, 1.0).unwrap();
        for ear in 0..2 {
            let x = c.noisy.channel(ear);
            let s = c.clean.channel(0);
            let ps: f64 = s.iter().map(|v| v * v).sum();
            let pn: f64 = x.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum();
            assert!((10.0 * (ps / pn).log10() - 5.0).abs() < 1e-9);
        }
        assert_ne!(c.noisy.channel(0), c.noisy.channel(1));
        let peak = c.noisy.channels().iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 1.0);
    }

    #[test]
    fn audiograms_are_sloping_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let a = synth_audiogram(&mut rng);
            assert!(a.windows(2).all(|w| w[0] <= w[1]));
            assert!(a.iter().all(|&v| (0.0..=80.0).contains(&v)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            n_listeners: 2,
            clips_per_listener: 3,
            duration_s: 0.25,
            ..SynthConfig::default()
        };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = synth_generate(&cfg, d1.path()).unwrap();
        synth_generate(&cfg, d2.path()).unwrap();
        assert_eq!(m1.len(), 6);
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        assert_eq!(read(d1.path(), "manifest.jsonl"), read(d2.path(), "manifest.jsonl"));
        for c in m1.clips() {
            let name = c.signal.as_ref().unwrap().file_name().unwrap().to_str().unwrap();
            let f = format!("audio/{name}");
            assert_eq!(read(d1.path(), &f), read(d2.path(), &f));
        }
    }
}
