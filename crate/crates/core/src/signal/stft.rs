use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Analysis window length in samples (32 ms at 16 kHz).
pub const WIN: usize = 512;
pub const HOP: usize = 256;
pub const N_BINS: usize = WIN / 2 + 1;

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

fn plans() -> &'static Plans {
    static PLANS: OnceLock<Plans> = OnceLock::new();
    PLANS.get_or_init(|| {
        let mut planner = FftPlanner::new();
        Plans {
            forward: planner.plan_fft_forward(WIN),
            inverse: planner.plan_fft_inverse(WIN),
            // Periodic Hann: sums to a constant at 50% overlap.
            window: (0..WIN)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WIN as f64).cos())
                .collect(),
        }
    })
}

/// One-sided complex spectrogram, `frames × N_BINS`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * N_BINS..(t + 1) * N_BINS]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        &mut self.data[t * N_BINS..(t + 1) * N_BINS]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    j as usize
}

/// Centered STFT with reflect padding of `WIN/2` on both sides.
/// Produces `1 + len/HOP` frames.
pub fn stft(x: &[f64]) -> Result<Spectrogram> {
    if x.len() < WIN {
        return Err(Error::contract(format!(
            "stft needs at least {WIN} samples, got {}",
            x.len()
        )));
    }
    let p = plans();
    let pad = (WIN / 2) as isize;
    let frames = 1 + x.len() / HOP;
    let mut data = Vec::with_capacity(frames * N_BINS);
    let mut buf = vec![Complex64::default(); WIN];
    for t in 0..frames {
        let start = (t * HOP) as isize - pad;
        for (n, b) in buf.iter_mut().enumerate() {
            let s = x[reflect(start + n as isize, x.len())];
            *b = Complex64::new(s * p.window[n], 0.0);
        }
        p.forward.process(&mut buf);
        data.extend_from_slice(&buf[..N_BINS]);
    }
    Ok(Spectrogram { frames, data })
}

/// Weighted overlap-add inverse of [`stft`], trimmed to `len` samples.
pub fn istft(spec: &Spectrogram, len: usize) -> Result<Vec<f64>> {
    if spec.data.len() != spec.frames * N_BINS {
        return Err(Error::Dimension {
            op: "istft",
            lhs: vec![spec.data.len()],
            rhs: vec![spec.frames, N_BINS],
        });
    }
    let p = plans();
    let pad = WIN / 2;
    let total = WIN + HOP * spec.frames.saturating_sub(1);
    if len + pad > total {
        return Err(Error::contract(format!(
            "{} frames cannot cover {len} samples",
            spec.frames
        )));
    }
    let mut out = vec![0.0; total];
    let mut env = vec![0.0; total];
    let mut buf = vec![Complex64::default(); WIN];
    for t in 0..spec.frames {
        let f = spec.frame(t);
        buf[..N_BINS].copy_from_slice(f);
        for k in 1..WIN / 2 {
            buf[WIN - k] = f[k].conj();
        }
        // The imaginary parts of DC and Nyquist cannot survive a real signal.
        buf[0].im = 0.0;
        buf[WIN / 2].im = 0.0;
        p.inverse.process(&mut buf);
        let off = t * HOP;
        for n in 0..WIN {
            let w = p.window[n];
            out[off + n] += buf[n].re / WIN as f64 * w;
            env[off + n] += w * w;
        }
    }
    Ok((0..len)
        .map(|i| {
            let e = env[i + pad];
            if e > 1e-12 {
                out[i + pad] / e
            } else {
                0.0
            }
        })
        .collect())
}
