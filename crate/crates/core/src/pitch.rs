//! Fundamental-frequency extraction and pitch-contour transforms.
//!
//! The extractor is a YIN-style estimator: squared-difference function, cumulative
//! mean normalization, absolute threshold, parabolic refinement. Frames are centered
//! exactly as in [`crate::spectral`], so a contour and the mel spectrogram of the same
//! waveform always have the same number of frames.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::spectral::{centered_frame, check_signal_length, StftConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct F0Config {
    pub sample_rate: u32,
    pub window_length: usize,
    pub hop_length: usize,
    pub fmin_search: f64,
    pub fmax_search: f64,
    /// Upper bound on the normalized difference for a frame to count as voiced.
    pub voicing_threshold: f64,
    /// Frames whose RMS is below this are unvoiced without further analysis.
    pub silence_rms: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            window_length: 1024,
            hop_length: 256,
            fmin_search: 50.0,
            fmax_search: 600.0,
            voicing_threshold: 0.2,
            silence_rms: 1e-3,
        }
    }
}

impl F0Config {
    /// Default search settings on the frame grid of `stft`.
    pub fn aligned_with(stft: &StftConfig) -> Self {
        Self {
            sample_rate: stft.sample_rate,
            window_length: stft.window_length,
            hop_length: stft.hop_length,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sample_rate == 0 || self.hop_length == 0 || self.window_length < 2 {
            return bad("sample_rate, hop_length and window_length must be positive".into());
        }
        if !(self.fmin_search > 0.0 && self.fmin_search < self.fmax_search) {
            return bad(format!(
                "search range {}..{} Hz must satisfy 0 < fmin < fmax",
                self.fmin_search, self.fmax_search
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.fmax_search > nyquist {
            return bad(format!("fmax_search {} Hz exceeds the Nyquist frequency {nyquist} Hz", self.fmax_search));
        }
        if !(self.voicing_threshold > 0.0 && self.voicing_threshold < 1.0) {
            return bad("voicing_threshold must lie in (0, 1)".into());
        }
        if self.max_lag() + 2 >= self.window_length {
            return bad(format!(
                "window of {} samples cannot hold a {} Hz period",
                self.window_length, self.fmin_search
            ));
        }
        Ok(())
    }

    fn min_lag(&self) -> usize {
        ((self.sample_rate as f64 / self.fmax_search).floor() as usize).max(2)
    }

    fn max_lag(&self) -> usize {
        (self.sample_rate as f64 / self.fmin_search).ceil() as usize
    }
}

/// Per-frame F0 in Hz. Unvoiced frames carry exactly `0.0` and `voiced == false`;
/// consumers branch on the mask, never on the value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchContour {
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
    pub hop_length: usize,
    pub sample_rate: u32,
}

impl PitchContour {
    pub fn new(f0: Vec<f64>, voiced: Vec<bool>, hop_length: usize, sample_rate: u32) -> Result<Self> {
        if f0.len() != voiced.len() {
            return Err(Error::LengthMismatch { left: f0.len(), right: voiced.len() });
        }
        for (t, (&f, &v)) in f0.iter().zip(&voiced).enumerate() {
            let ok = if v { f.is_finite() && f > 0.0 } else { f == 0.0 };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "frame {t}: f0 {f} inconsistent with voiced flag {v}"
                )));
            }
        }
        Ok(Self { f0, voiced, hop_length, sample_rate })
    }

    /// Builds a contour from Hz values, treating non-positive entries as unvoiced.
    pub fn from_hz(values: &[f64], hop_length: usize, sample_rate: u32) -> Self {
        let voiced: Vec<bool> = values.iter().map(|&f| f > 0.0).collect();
        let f0 = values.iter().map(|&f| if f > 0.0 { f } else { 0.0 }).collect();
        Self { f0, voiced, hop_length, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn n_voiced(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }

    pub fn voiced_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0.iter().zip(&self.voiced).filter(|(_, &v)| v).map(|(&f, _)| f)
    }

    /// Median over voiced frames, `None` when nothing is voiced.
    pub fn median_voiced(&self) -> Option<f64> {
        median(self.voiced_values().collect())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["frame", "f0_hz", "voiced"])?;
        for (t, (&f, &v)) in self.f0.iter().zip(&self.voiced).enumerate() {
            w.write_record([t.to_string(), f.to_string(), u8::from(v).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(reader: R, hop_length: usize, sample_rate: u32, origin: &Path) -> Result<Self> {
        let parse_err = |reason: String| Error::Parse { path: origin.to_path_buf(), reason };
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["frame", "f0_hz", "voiced"] {
            return Err(parse_err(format!("unexpected header {:?}", headers)));
        }
        let mut f0 = Vec::new();
        let mut voiced = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let frame: usize = rec[0].parse().map_err(|_| parse_err(format!("bad frame index on row {}", i + 1)))?;
            if frame != i {
                return Err(parse_err(format!("frame {frame} out of order on row {}", i + 1)));
            }
            let f: f64 = rec[1].parse().map_err(|_| parse_err(format!("bad f0 on row {}", i + 1)))?;
            let v = match &rec[2] {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(format!("voiced must be 0 or 1, got `{other}`"))),
            };
            f0.push(f);
            voiced.push(v);
        }
        PitchContour::new(f0, voiced, hop_length, sample_rate).map_err(|e| parse_err(e.to_string()))
    }

    pub fn load_csv(path: impl AsRef<Path>, hop_length: usize, sample_rate: u32) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_csv(std::fs::File::open(path)?, hop_length, sample_rate, path)
    }
}

pub(crate) fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Estimates one F0 value per centered frame.
pub fn extract_f0(wave: &Waveform, cfg: &F0Config) -> Result<PitchContour> {
    cfg.validate()?;
    if wave.sample_rate != cfg.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "waveform is {} Hz but the extractor expects {} Hz",
            wave.sample_rate, cfg.sample_rate
        )));
    }
    check_signal_length(wave.len(), cfg.window_length)?;
    let n_frames = 1 + wave.len() / cfg.hop_length;
    let mut frame = vec![0.0f64; cfg.window_length];
    let mut diff = vec![0.0f64; cfg.max_lag() + 2];
    let mut f0 = Vec::with_capacity(n_frames);
    let mut voiced = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        for (dst, s) in frame.iter_mut().zip(centered_frame(&wave.samples, t, cfg.window_length, cfg.hop_length)) {
            *dst = s as f64;
        }
        match estimate_frame(&frame, &mut diff, cfg) {
            Some(hz) => {
                f0.push(hz);
                voiced.push(true);
            }
            None => {
                f0.push(0.0);
                voiced.push(false);
            }
        }
    }
    Ok(PitchContour { f0, voiced, hop_length: cfg.hop_length, sample_rate: cfg.sample_rate })
}

fn estimate_frame(frame: &[f64], diff: &mut [f64], cfg: &F0Config) -> Option<f64> {
    let energy = frame.iter().map(|x| x * x).sum::<f64>() / frame.len() as f64;
    if energy.sqrt() < cfg.silence_rms {
        return None;
    }
    let max_lag = cfg.max_lag();
    let integration = frame.len() - max_lag - 1;

    // Cumulative-mean-normalized squared difference; diff[0] = 1 by convention.
    diff[0] = 1.0;
    let mut running = 0.0;
    for tau in 1..=max_lag + 1 {
        let d: f64 = (0..integration).map(|j| {
            let e = frame[j] - frame[j + tau];
            e * e
        }).sum();
        running += d;
        diff[tau] = if running > 0.0 { d * tau as f64 / running } else { 1.0 };
    }

    let mut tau = cfg.min_lag();
    let best = loop {
        if tau > max_lag {
            return None;
        }
        if diff[tau] < cfg.voicing_threshold {
            while tau < max_lag && diff[tau + 1] < diff[tau] {
                tau += 1;
            }
            break tau;
        }
        tau += 1;
    };

    let (a, b, c) = (diff[best - 1], diff[best], diff[best + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    let hz = cfg.sample_rate as f64 / (best as f64 + shift);
    (hz >= cfg.fmin_search && hz <= cfg.fmax_search).then_some(hz)
}

/// Multiplies every voiced frame by `factor`; voicing is untouched.
pub fn scale_pitch(contour: &PitchContour, factor: f64) -> Result<PitchContour> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!("pitch scale factor must be positive, got {factor}")));
    }
    let mut out = contour.clone();
    for (f, &v) in out.f0.iter_mut().zip(&contour.voiced) {
        if v {
            *f *= factor;
        }
    }
    Ok(out)
}

/// Log-F0 statistics of a speaker or utterance, over voiced frames only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocalRangeStats {
    pub log_f0_mean: f64,
    pub log_f0_std: f64,
    pub n_voiced_frames: usize,
}

impl VocalRangeStats {
    /// Pooled statistics over several contours. A result with zero voiced frames is
    /// returned rather than rejected; check [`VocalRangeStats::is_valid`].
    pub fn from_contours<'a>(contours: impl IntoIterator<Item = &'a PitchContour>) -> Self {
        let logs: Vec<f64> = contours
            .into_iter()
            .flat_map(|c| c.voiced_values().map(f64::ln).collect::<Vec<_>>())
            .collect();
        let n = logs.len();
        if n == 0 {
            return Self { log_f0_mean: 0.0, log_f0_std: 0.0, n_voiced_frames: 0 };
        }
        let mean = logs.iter().sum::<f64>() / n as f64;
        let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n as f64;
        Self { log_f0_mean: mean, log_f0_std: var.sqrt(), n_voiced_frames: n }
    }

    pub fn from_contour(contour: &PitchContour) -> Self {
        Self::from_contours([contour])
    }

    pub fn is_valid(&self) -> bool {
        self.n_voiced_frames > 0 && self.log_f0_mean.is_finite() && self.log_f0_std >= 0.0
    }
}

/// Maps voiced frames through `log f0' = (log f0 - src.mean) * (tgt.std / src.std) + tgt.mean`.
/// With `match_std == false` the ratio is 1 and only the mean moves.
pub fn fit_vocal_range(
    contour: &PitchContour,
    source: &VocalRangeStats,
    target: &VocalRangeStats,
    match_std: bool,
) -> Result<PitchContour> {
    if !source.is_valid() {
        return Err(Error::DegenerateStats("source statistics have no voiced frames".into()));
    }
    if !target.is_valid() {
        return Err(Error::DegenerateStats("target statistics have no voiced frames".into()));
    }
    let ratio = if match_std {
        if !(source.log_f0_std > 0.0) {
            return Err(Error::DegenerateStats("source log-F0 std is zero; cannot match variance".into()));
        }
        target.log_f0_std / source.log_f0_std
    } else {
        1.0
    };
    let mut out = contour.clone();
    for (f, &v) in out.f0.iter_mut().zip(&contour.voiced) {
        if v {
            *f = ((f.ln() - source.log_f0_mean) * ratio + target.log_f0_mean).exp();
        }
    }
    Ok(out)
}
