use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

// Windowed-sinc lowpass at the upsampled rate, symmetric (linear phase),
// length 2·half + 1, gain `up` so zero-stuffing does not lose level.
fn design(up: usize, down: usize, half: usize) -> Vec<f64> {
    let cutoff = 0.5 / up.max(down) as f64 * 0.94;
    let n = 2 * half + 1;
    (0..n)
        .map(|i| {
            let j = i as f64 - half as f64;
            let x = 2.0 * cutoff * j;
            let sinc = if j == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
            // Blackman window.
            let t = i as f64 / (n - 1) as f64;
            let w = 0.42 - 0.5 * (2.0 * PI * t).cos() + 0.08 * (4.0 * PI * t).cos();
            up as f64 * 2.0 * cutoff * sinc * w
        })
        .collect()
}

fn resample_channel(x: &[f64], up: usize, down: usize, h: &[f64]) -> Vec<f64> {
    let half = (h.len() / 2) as isize;
    let out_len = (x.len() * up).div_ceil(down);
    let (up_i, n_x) = (up as isize, x.len() as isize);
    (0..out_len)
        .map(|m| {
            let centre = (m * down) as isize;
            // Input samples n with |centre - n·up| <= half.
            let lo = ((centre - half) as f64 / up as f64).ceil().max(0.0) as isize;
            let hi = ((centre + half).div_euclid(up_i)).min(n_x - 1);
            (lo..=hi)
                .map(|n| x[n as usize] * h[(centre - n * up_i + half) as usize])
                .sum()
        })
        .collect()
}

/// Rational-factor polyphase resampler for offline preprocessing.
pub fn resample(w: &Waveform, to: u32) -> Result<Waveform> {
    if to == 0 {
        return Err(Error::config("target sample rate must be positive"));
    }
    let from = w.sample_rate();
    if from == to {
        return Ok(w.clone());
    }
    let g = gcd(from as u64, to as u64);
    let (up, down) = ((to as u64 / g) as usize, (from as u64 / g) as usize);
    if up.max(down) > 1000 {
        return Err(Error::config(format!(
            "{from} -> {to} Hz reduces to {up}/{down}; factors above 1000 are not supported"
        )));
    }
    let h = design(up, down, 16 * up.max(down));
    let channels = w
        .channels()
        .iter()
        .map(|c| resample_channel(c, up, down, &h))
        .collect();
    Waveform::new(channels, to)
}
