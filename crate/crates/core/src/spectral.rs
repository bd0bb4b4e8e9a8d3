//! Short-time Fourier analysis, log-mel spectrograms and iterative phase reconstruction.
//!
//! Frames are centered: the signal is reflection-padded by `window_length / 2` on both
//! sides, so frame `t` is centered on sample `t * hop_length` and a signal of `n`
//! samples yields `1 + n / hop_length` frames. The pitch extractor uses the same rule,
//! which keeps mel and F0 frames aligned one-to-one.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_length: usize,
    pub hop_length: usize,
    pub mel_channels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Mel energies are clamped to this value before the logarithm.
    pub energy_floor: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            window_length: 1024,
            hop_length: 256,
            mel_channels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            energy_floor: 1e-5,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.window_length < 2 || self.hop_length == 0 || self.hop_length > self.window_length {
            return bad("require 0 < hop_length <= window_length and window_length >= 2");
        }
        if self.mel_channels == 0 {
            return bad("mel_channels must be >= 1");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("require 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(self.energy_floor > 0.0) {
            return bad("energy_floor must be positive");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    /// Number of centered frames for a signal of `n_samples`.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop_length
    }
}

/// Log-mel energies, `n_frames × n_channels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub data: Vec<f32>,
    pub n_frames: usize,
    pub n_channels: usize,
    pub hop_length: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(data: Vec<f32>, n_frames: usize, n_channels: usize, hop_length: usize, sample_rate: u32) -> Result<Self> {
        if data.len() != n_frames * n_channels {
            return Err(Error::DimensionMismatch { left: data.len(), right: n_frames * n_channels });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("mel spectrogram contains non-finite values".into()));
        }
        Ok(Self { data, n_frames, n_channels, hop_length, sample_rate })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_channels..(t + 1) * self.n_channels]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.n_channels)
    }

    /// Binary layout: little-endian u32 frame count, u32 channel count, then row-major f32 values.
    pub fn write_binary<W: Write>(&self, mut writer: W) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 4 * self.data.len());
        buf.extend_from_slice(&(self.n_frames as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_channels as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        writer.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_binary(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn read_binary(bytes: &[u8], hop_length: usize, sample_rate: u32, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Parse { path: origin.to_path_buf(), reason };
        if bytes.len() < 8 {
            return Err(bad("missing 8-byte header".into()));
        }
        let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != 4 * t * c {
            return Err(bad(format!("header declares {t}x{c} values but body holds {} bytes", body.len())));
        }
        let data = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Self::new(data, t, c, hop_length, sample_rate).map_err(|e| bad(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>, hop_length: usize, sample_rate: u32) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_binary(&std::fs::read(path)?, hop_length, sample_rate, path)
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency (Hz) of every mel channel.
pub fn mel_center_frequencies(cfg: &StftConfig) -> Vec<f64> {
    let points = mel_edge_points(cfg);
    points[1..=cfg.mel_channels].to_vec()
}

fn mel_edge_points(cfg: &StftConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let n = cfg.mel_channels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Triangular filters with unit peak, `mel_channels × n_bins`.
pub fn mel_filterbank(cfg: &StftConfig) -> Vec<Vec<f64>> {
    let edges = mel_edge_points(cfg);
    let bin_hz = cfg.sample_rate as f64 / cfg.window_length as f64;
    (0..cfg.mel_channels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..cfg.n_bins())
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let rising = (f - l) / (c - l);
                    let falling = (r - f) / (r - c);
                    rising.min(falling).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos()).collect()
}

/// Index into a reflection-padded signal (`abcd` → `...cb|abcd|cb...`).
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Samples of the centered frame `t`, reflection padded at the edges.
pub(crate) fn centered_frame(samples: &[f32], t: usize, window_length: usize, hop_length: usize) -> impl Iterator<Item = f32> + '_ {
    let start = (t * hop_length) as isize - (window_length / 2) as isize;
    (0..window_length).map(move |i| samples[reflect_index(start + i as isize, samples.len())])
}

pub(crate) fn check_signal_length(len: usize, window_length: usize) -> Result<()> {
    // Reflection padding by half a window needs more than half a window of signal.
    if len <= window_length / 2 {
        return Err(Error::SignalTooShort { len, window: window_length });
    }
    Ok(())
}

struct Stft {
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    n_fft: usize,
    hop: usize,
}

impl Stft {
    fn new(cfg: &StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window: hann_window(cfg.window_length),
            forward: planner.plan_fft_forward(cfg.window_length),
            inverse: planner.plan_fft_inverse(cfg.window_length),
            n_fft: cfg.window_length,
            hop: cfg.hop_length,
        }
    }

    /// Complex spectra of every centered frame, `n_frames × (n_fft/2 + 1)`.
    fn analyze(&self, samples: &[f32]) -> Vec<Vec<Complex<f64>>> {
        let n_frames = 1 + samples.len() / self.hop;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        (0..n_frames)
            .map(|t| {
                for (i, (b, x)) in buf.iter_mut().zip(centered_frame(samples, t, self.n_fft, self.hop)).enumerate() {
                    *b = Complex::new(x as f64 * self.window[i], 0.0);
                }
                self.forward.process(&mut buf);
                buf[..self.n_fft / 2 + 1].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse of `analyze`; returns `hop * (n_frames - 1)` samples.
    fn synthesize(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f32> {
        let n_frames = spectra.len();
        let pad = self.n_fft / 2;
        let full_len = self.n_fft + self.hop * (n_frames - 1);
        let mut acc = vec![0.0f64; full_len];
        let mut norm = vec![0.0f64; full_len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for (t, spec) in spectra.iter().enumerate() {
            buf[..spec.len()].copy_from_slice(spec);
            // Hermitian symmetry for a real signal.
            for k in 1..self.n_fft / 2 {
                buf[self.n_fft - k] = spec[k].conj();
            }
            self.inverse.process(&mut buf);
            let offset = t * self.hop;
            for i in 0..self.n_fft {
                let w = self.window[i];
                acc[offset + i] += buf[i].re / self.n_fft as f64 * w;
                norm[offset + i] += w * w;
            }
        }
        let out_len = self.hop * (n_frames - 1);
        (0..out_len)
            .map(|i| {
                let j = i + pad;
                if norm[j] > 1e-8 {
                    (acc[j] / norm[j]) as f32
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Log-mel spectrogram of a waveform. Magnitude (not power) spectra are projected onto
/// the mel filterbank, floored at `energy_floor` and passed through the natural log.
pub fn mel_spectrogram(wave: &Waveform, cfg: &StftConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if wave.sample_rate != cfg.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "waveform is {} Hz but the analysis expects {} Hz",
            wave.sample_rate, cfg.sample_rate
        )));
    }
    check_signal_length(wave.len(), cfg.window_length)?;
    let stft = Stft::new(cfg);
    let bank = mel_filterbank(cfg);
    let spectra = stft.analyze(&wave.samples);
    let n_frames = spectra.len();
    let mut data = Vec::with_capacity(n_frames * cfg.mel_channels);
    for spec in &spectra {
        let mags: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
        for filter in &bank {
            let e: f64 = filter.iter().zip(&mags).map(|(w, m)| w * m).sum();
            data.push(e.max(cfg.energy_floor).ln() as f32);
        }
    }
    Ok(MelSpectrogram {
        data,
        n_frames,
        n_channels: cfg.mel_channels,
        hop_length: cfg.hop_length,
        sample_rate: cfg.sample_rate,
    })
}

/// Inverts a log-mel spectrogram to audio by iterative phase reconstruction.
///
/// Mel magnitudes are mapped back to linear-frequency magnitudes with the filterbank
/// pseudo-inverse (negative values clipped), then `iterations` rounds of alternating
/// projections estimate a consistent phase, starting from uniformly random phases drawn
/// from `seed`. Returns `hop_length * (n_frames - 1)` samples.
pub fn reconstruct_waveform(mel: &MelSpectrogram, cfg: &StftConfig, iterations: usize, seed: u64) -> Result<Waveform> {
    cfg.validate()?;
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    if mel.n_channels != cfg.mel_channels || mel.hop_length != cfg.hop_length {
        return Err(Error::DimensionMismatch { left: mel.n_channels, right: cfg.mel_channels });
    }
    if mel.n_frames < 2 {
        return Err(Error::EmptyInput("mel spectrogram needs at least two frames"));
    }
    let magnitudes = mel_to_linear(mel, cfg);
    let stft = Stft::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectra: Vec<Vec<Complex<f64>>> = magnitudes
        .iter()
        .map(|frame| {
            frame
                .iter()
                .map(|&m| Complex::from_polar(m, rng.random_range(0.0..2.0 * PI)))
                .collect()
        })
        .collect();
    for _ in 0..iterations {
        let signal = stft.synthesize(&spectra);
        let rebuilt = stft.analyze(&signal);
        for ((target, frame), mags) in spectra.iter_mut().zip(rebuilt).zip(&magnitudes) {
            for ((z, r), &m) in target.iter_mut().zip(frame).zip(mags) {
                let n = r.norm();
                *z = if n > 1e-12 { r * (m / n) } else { Complex::new(m, 0.0) };
            }
        }
    }
    let mut wave = Waveform { samples: stft.synthesize(&spectra), sample_rate: cfg.sample_rate };
    wave.normalize_peak();
    Ok(wave)
}

const NNLS_ITERATIONS: usize = 100;

// Non-negative least squares fit of linear magnitudes to the mel energies
// (multiplicative updates over the sparse filterbank).
fn mel_to_linear(mel: &MelSpectrogram, cfg: &StftConfig) -> Vec<Vec<f64>> {
    let bank = mel_filterbank(cfg);
    let n_bins = cfg.n_bins();
    let rows: Vec<Vec<(usize, f64)>> = bank
        .iter()
        .map(|row| row.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(j, w)| (j, *w)).collect())
        .collect();
    let floor = cfg.energy_floor;
    mel.frames()
        .map(|frame| {
            let y: Vec<f64> = frame
                .iter()
                .map(|&v| {
                    let e = (v as f64).exp();
                    // Floored channels carry no information.
                    if e <= floor * 1.0001 {
                        0.0
                    } else {
                        e
                    }
                })
                .collect();
            let mut bty = vec![0.0; n_bins];
            let mut norm = vec![0.0; n_bins];
            for (row, &ym) in rows.iter().zip(&y) {
                for &(j, w) in row {
                    bty[j] += w * ym;
                    norm[j] += w;
                }
            }
            let mut x: Vec<f64> = bty.iter().zip(&norm).map(|(b, n)| if *n > 0.0 { b / n } else { 0.0 }).collect();
            let mut bx = vec![0.0; y.len()];
            let mut btbx = vec![0.0; n_bins];
            for _ in 0..NNLS_ITERATIONS {
                for (m, row) in rows.iter().enumerate() {
                    bx[m] = row.iter().map(|&(j, w)| w * x[j]).sum();
                }
                btbx.iter_mut().for_each(|v| *v = 0.0);
                for (row, &v) in rows.iter().zip(&bx) {
                    for &(j, w) in row {
                        btbx[j] += w * v;
                    }
                }
                for j in 0..n_bins {
                    x[j] = if btbx[j] > 1e-30 { x[j] * bty[j] / btbx[j] } else { 0.0 };
                }
            }
            x
        })
        .collect()
}

/// Mean absolute log-mel difference between two spectrograms of equal shape.
pub fn mel_distance(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if a.n_channels != b.n_channels {
        return Err(Error::DimensionMismatch { left: a.n_channels, right: b.n_channels });
    }
    if a.n_frames != b.n_frames {
        return Err(Error::LengthMismatch { left: a.n_frames, right: b.n_frames });
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum();
    Ok(sum / a.data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, amp: f32) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32)
            .collect();
        Waveform { samples, sample_rate: SAMPLE_RATE }
    }

    #[test]
    fn silence_maps_to_the_floor() {
        let cfg = StftConfig::default();
        let mel = mel_spectrogram(&Waveform::silence(4096, SAMPLE_RATE), &cfg).unwrap();
        let floor = (cfg.energy_floor.ln()) as f32;
        assert!(mel.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn frame_count_follows_centered_padding() {
        // 1 + floor((22050 + 1024 - 1024) / 256) = 87
        let cfg = StftConfig::default();
        let mel = mel_spectrogram(&Waveform::silence(22_050, SAMPLE_RATE), &cfg).unwrap();
        assert_eq!(mel.n_frames, 87);
        assert_eq!(mel.n_channels, 80);
    }

    #[test]
    fn tone_peaks_in_nearest_channel() {
        let cfg = StftConfig::default();
        // Oracle: nearest HTK-mel center frequency, computed from the scale directly.
        let lo = 0.0;
        let hi = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        let centers: Vec<f64> = (1..=80)
            .map(|i| 700.0 * (10f64.powf((lo + (hi - lo) * i as f64 / 81.0) / 2595.0) - 1.0))
            .collect();
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().partial_cmp(&(b.1 - 440.0).abs()).unwrap())
            .unwrap()
            .0;
        let mel = mel_spectrogram(&tone(440.0, 0.5, 0.5), &cfg).unwrap();
        for t in 2..mel.n_frames - 2 {
            let frame = mel.frame(t);
            let argmax = (0..frame.len()).max_by(|&a, &b| frame[a].partial_cmp(&frame[b]).unwrap()).unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn analysis_is_bitwise_deterministic() {
        let cfg = StftConfig::default();
        let w = tone(311.0, 0.3, 0.7);
        assert_eq!(mel_spectrogram(&w, &cfg).unwrap(), mel_spectrogram(&w, &cfg).unwrap());
    }

    #[test]
    fn too_short_signal_is_rejected() {
        let cfg = StftConfig::default();
        let err = mel_spectrogram(&Waveform::silence(100, SAMPLE_RATE), &cfg).unwrap_err();
        assert!(matches!(err, Error::SignalTooShort { .. }));
    }

    #[test]
    fn reflect_index_mirrors_without_repeating_edges() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn overlap_add_inverts_analysis() {
        let cfg = StftConfig::default();
        let stft = Stft::new(&cfg);
        let w = tone(200.0, 0.25, 0.5);
        let n = stft.hop * (cfg.frame_count(w.len()) - 1);
        let back = stft.synthesize(&stft.analyze(&w.samples));
        assert_eq!(back.len(), n);
        let err = back.iter().zip(&w.samples).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-4, "err={err}");
    }

    #[test]
    fn reconstruction_is_deterministic_and_frame_aligned() {
        let cfg = StftConfig::default();
        let mel = mel_spectrogram(&tone(440.0, 0.3, 0.5), &cfg).unwrap();
        let a = reconstruct_waveform(&mel, &cfg, 5, 7).unwrap();
        let b = reconstruct_waveform(&mel, &cfg, 5, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(mel_spectrogram(&a, &cfg).unwrap().n_frames, mel.n_frames);
    }

    #[test]
    fn more_iterations_do_not_increase_error() {
        let cfg = StftConfig::default();
        let mel = mel_spectrogram(&tone(440.0, 0.4, 0.5), &cfg).unwrap();
        let err = |iters| {
            let w = reconstruct_waveform(&mel, &cfg, iters, 3).unwrap();
            mel_distance(&mel_spectrogram(&w, &cfg).unwrap(), &mel).unwrap()
        };
        let (e1, e60) = (err(1), err(60));
        assert!(e60 <= e1, "e1={e1} e60={e60}");
    }

    #[test]
    fn floor_mel_reconstructs_to_near_silence() {
        let cfg = StftConfig::default();
        let mel = mel_spectrogram(&Waveform::silence(8000, SAMPLE_RATE), &cfg).unwrap();
        let w = reconstruct_waveform(&mel, &cfg, 10, 0).unwrap();
        assert!(w.peak() < 0.05);
    }

    #[test]
    fn binary_round_trip() {
        let mel = MelSpectrogram::new(vec![0.5, -1.0, 2.25, -11.5, 0.0, 3.0], 3, 2, 256, SAMPLE_RATE).unwrap();
        let mut buf = Vec::new();
        mel.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..8], &[3, 0, 0, 0, 2, 0, 0, 0]);
        let back = MelSpectrogram::read_binary(&buf, 256, SAMPLE_RATE, Path::new("x.mel")).unwrap();
        assert_eq!(back, mel);
        assert!(MelSpectrogram::read_binary(&buf[..10], 256, SAMPLE_RATE, Path::new("x.mel")).is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = StftConfig::default();
        let mel = mel_spectrogram(&tone(440.0, 0.1, 0.5), &cfg).unwrap();
        assert!(reconstruct_waveform(&mel, &cfg, 0, 0).is_err());
    }
}
