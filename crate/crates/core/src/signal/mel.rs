use std::sync::OnceLock;

use super::stft::{stft, N_BINS, WIN};
use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const N_MELS: usize = 40;
/// Added to filterbank energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters spaced evenly on the mel scale over 0 Hz to Nyquist,
/// as an `n_mels × N_BINS` row-major matrix with unit peaks.
pub fn mel_filterbank(n_mels: usize) -> Vec<f64> {
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; n_mels * N_BINS];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..N_BINS {
            let f = k as f64 * SAMPLE_RATE as f64 / WIN as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[m * N_BINS + k] = w;
        }
    }
    fb
}

struct SparseBank {
    n_mels: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

fn cached_bank(n_mels: usize) -> Vec<Vec<(usize, f64)>> {
    let dense = mel_filterbank(n_mels);
    (0..n_mels)
        .map(|m| {
            (0..N_BINS)
                .filter_map(|k| {
                    let w = dense[m * N_BINS + k];
                    (w != 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

pub(crate) fn logmel_channel(x: &[f64], n_mels: usize) -> Result<Tensor<f64>> {
    if n_mels == 0 {
        return Err(Error::config("n_mels must be positive"));
    }
    static DEFAULT: OnceLock<SparseBank> = OnceLock::new();
    let default = DEFAULT.get_or_init(|| SparseBank {
        n_mels: N_MELS,
        rows: cached_bank(N_MELS),
    });
    let other;
    let rows = if n_mels == default.n_mels {
        &default.rows
    } else {
        other = cached_bank(n_mels);
        &other
    };
    let power = stft(x)?.power();
    let frames = power.len() / N_BINS;
    let mut out = Vec::with_capacity(frames * n_mels);
    for t in 0..frames {
        let p = &power[t * N_BINS..(t + 1) * N_BINS];
        for row in rows {
            let e: f64 = row.iter().map(|&(k, w)| w * p[k]).sum();
            out.push((e + LOG_FLOOR).ln());
        }
    }
    Tensor::new([frames, n_mels], out)
}

/// `log(mel energies + 1e-10)` of a mono 16 kHz waveform, `frames × n_mels`.
pub fn logmel_extract(w: &Waveform, n_mels: usize) -> Result<Tensor<f64>> {
    w.require_rate(SAMPLE_RATE)?;
    if w.n_channels() != 1 {
        return Err(Error::contract("logmel_extract expects a mono waveform"));
    }
    logmel_channel(w.channel(0), n_mels)
}
