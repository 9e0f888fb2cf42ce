use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Read a 16-bit PCM or 32-bit float WAV at whatever rate it was stored.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if !(1..=2).contains(&n_ch) {
        return Err(Error::Wav {
            path: path.to_path_buf(),
            message: format!("{n_ch} channels; only mono and stereo are supported"),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>(),
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>(),
        (fmt, bits) => {
            return Err(Error::Wav {
                path: path.to_path_buf(),
                message: format!("unsupported sample format {fmt:?}/{bits} bit"),
            })
        }
    }
    .map_err(|e| wav_err(path, e))?;
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, &x) in frame.iter().enumerate() {
            channels[c].push(x);
        }
    }
    Waveform::new(channels, spec.sample_rate)
}

/// [`read_wav`] restricted to the model rate.
pub fn load_wav_16k(path: &Path) -> Result<Waveform> {
    let w = read_wav(path)?;
    w.require_rate(SAMPLE_RATE).map_err(|_| {
        Error::contract(format!(
            "{} is {} Hz; resample it to {SAMPLE_RATE} Hz offline first",
            path.display(),
            w.sample_rate()
        ))
    })?;
    Ok(w)
}

/// Write as 32-bit float.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: w.n_channels() as u16,
        sample_rate: w.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for i in 0..w.len() {
        for ch in w.channels() {
            writer.write_sample(ch[i] as f32).map_err(|e| wav_err(path, e))?;
        }
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}
