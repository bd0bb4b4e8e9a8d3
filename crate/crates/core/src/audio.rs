//! Waveform container, WAV input/output and sample-rate conversion.

use std::f64::consts::PI;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Canonical synthesis sample rate.
pub const SAMPLE_RATE: u32 = 22_050;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Scales the signal down so that its peak does not exceed 1. Quieter signals are untouched.
    pub fn normalize_peak(&mut self) {
        let peak = self.peak();
        if peak > 1.0 {
            self.samples.iter_mut().for_each(|s| *s /= peak);
        }
    }

    /// Returns the waveform converted to `target_rate`.
    pub fn resampled(&self, target_rate: u32) -> Result<Waveform> {
        if target_rate == 0 {
            return Err(Error::InvalidArgument("target sample rate must be positive".into()));
        }
        if target_rate == self.sample_rate {
            return Ok(self.clone());
        }
        Ok(Waveform {
            samples: resample(&self.samples, self.sample_rate, target_rate),
            sample_rate: target_rate,
        })
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// The output holds `ceil(len * to / from)` samples.
pub fn resample(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if input.is_empty() {
        return Vec::new();
    }
    let ratio = to as f64 / from as f64;
    let out_len = (input.len() as u64 * to as u64).div_ceil(from as u64) as usize;
    // Cutoff relative to the input Nyquist; downsampling narrows the passband.
    let cutoff = ratio.min(1.0) * 0.95;
    let half_width = (16.0 / cutoff).ceil() as isize;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let t = m as f64 / ratio;
        let center = t.floor() as isize;
        let mut acc = 0.0f64;
        for k in (center - half_width + 1)..=(center + half_width) {
            if k < 0 || k as usize >= input.len() {
                continue;
            }
            let x = t - k as f64;
            let w = 0.5 + 0.5 * (PI * x / half_width as f64).cos();
            acc += input[k as usize] as f64 * cutoff * sinc(cutoff * x) * w;
        }
        out.push(acc as f32);
    }
    out
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Reads a PCM WAV file (16-bit integer or 32-bit float), mixes it down to mono,
/// converts it to `target_rate` and scales it so the peak is at most 1.
pub fn load_waveform(path: impl AsRef<Path>, target_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::FormatError(msg) => Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: msg.to_string(),
        },
        hound::Error::Unsupported => Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: "unsupported WAV variant".into(),
        },
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        (format, bits) => {
            return Err(Error::UnsupportedEncoding {
                path: path.to_path_buf(),
                detail: format!("{bits}-bit {format:?} samples"),
            })
        }
    };
    let channels = spec.channels.max(1) as usize;
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    if mono.is_empty() {
        return Err(Error::EmptyAudio(path.to_path_buf()));
    }
    if mono.iter().any(|s| !s.is_finite()) {
        return Err(Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: "non-finite float samples".into(),
        });
    }
    let mut wave = Waveform { samples: mono, sample_rate: spec.sample_rate }.resampled(target_rate)?;
    wave.normalize_peak();
    Ok(wave)
}

/// Sample encoding used when writing WAV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavEncoding {
    #[default]
    Pcm16,
    Float32,
}

/// Writes a mono WAV file at the waveform's own sample rate. Samples are clipped to `[-1, 1]`.
pub fn write_waveform(path: impl AsRef<Path>, wave: &Waveform, encoding: WavEncoding) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for &s in &wave.samples {
        let s = s.clamp(-1.0, 1.0);
        match encoding {
            WavEncoding::Pcm16 => writer.write_sample((s * 32767.0).round() as i16)?,
            WavEncoding::Float32 => writer.write_sample(s)?,
        }
    }
    writer.finalize()?;
    Ok(())
}
