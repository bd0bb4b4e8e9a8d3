//! Objective prosody metrics: GPE, VDE, FFE and mel-cepstral distortion.

mod cepstral;
mod pitch_error;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cepstral::{
    dtw_align, frame_distortion_db, mel_cepstral_distortion, mel_cepstrum, Alignment, McepSequence,
    DEFAULT_MCEP_COEFFS,
};
pub use pitch_error::{
    f0_frame_error, frame_error_counts, gross_pitch_error, voicing_decision_error, FrameErrorCounts,
    GPE_THRESHOLD,
};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::pitch::{extract_f0, F0Config, PitchContour};
use crate::spectral::{mel_spectrogram, StftConfig};

/// Metrics for one reference/estimate pair. Error rates are fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub gpe: f64,
    pub vde: f64,
    pub ffe: f64,
    pub mcd_db: f64,
    pub n_frames: usize,
    pub n_both_voiced: usize,
    pub n_voicing_errors: usize,
    pub n_gross_errors: usize,
}

impl MetricReport {
    pub fn from_counts(counts: FrameErrorCounts, mcd_db: f64) -> Self {
        Self {
            gpe: counts.gpe(),
            vde: counts.vde(),
            ffe: counts.ffe(),
            mcd_db,
            n_frames: counts.n_frames,
            n_both_voiced: counts.n_both_voiced,
            n_voicing_errors: counts.n_voicing_errors,
            n_gross_errors: counts.n_gross_errors,
        }
    }

    /// `ffe * n_frames == vde * n_frames + gpe * n_both_voiced`, checked on the integer counts
    /// recovered from the fractions.
    pub fn decomposition_holds(&self) -> bool {
        let recover = |fraction: f64, den: usize| (fraction * den as f64).round() as usize;
        let ffe_count = recover(self.ffe, self.n_frames);
        let vde_count = recover(self.vde, self.n_frames);
        let gpe_count = recover(self.gpe, self.n_both_voiced);
        ffe_count == vde_count + gpe_count
            && vde_count == self.n_voicing_errors
            && gpe_count == self.n_gross_errors
    }
}

/// Analysis settings shared by every metric computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub stft: StftConfig,
    pub f0: F0Config,
    pub gpe_threshold: f64,
    pub mcep_coeffs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let stft = StftConfig::default();
        Self { f0: F0Config::aligned_with(&stft), stft, gpe_threshold: GPE_THRESHOLD, mcep_coeffs: DEFAULT_MCEP_COEFFS }
    }
}

/// Computes all metrics for a pair of waveforms.
///
/// Contours of equal length are compared frame by frame. When the lengths differ, frames
/// are paired along the DTW path of the mel cepstra, and the F0 error rates are taken over
/// that path.
pub fn evaluate_pair(reference: &Waveform, estimate: &Waveform, cfg: &EvalConfig) -> Result<MetricReport> {
    let ref_mel = mel_spectrogram(reference, &cfg.stft)?;
    let est_mel = mel_spectrogram(estimate, &cfg.stft)?;
    let ref_cep = mel_cepstrum(&ref_mel, cfg.mcep_coeffs)?;
    let est_cep = mel_cepstrum(&est_mel, cfg.mcep_coeffs)?;
    let alignment = dtw_align(&ref_cep, &est_cep)?;
    let mcd = cepstral::distortion_along(&ref_cep, &est_cep, &alignment.path);

    let ref_f0 = extract_f0(reference, &cfg.f0)?;
    let est_f0 = extract_f0(estimate, &cfg.f0)?;
    let counts = if ref_f0.len() == est_f0.len() {
        frame_error_counts(&ref_f0, &est_f0, cfg.gpe_threshold)?
    } else {
        let (r, e) = align_contours(&ref_f0, &est_f0, &alignment.path);
        frame_error_counts(&r, &e, cfg.gpe_threshold)?
    };
    Ok(MetricReport::from_counts(counts, mcd))
}

fn align_contours(reference: &PitchContour, estimate: &PitchContour, path: &[(usize, usize)]) -> (PitchContour, PitchContour) {
    let pick = |c: &PitchContour, idx: &mut dyn Iterator<Item = usize>| {
        let (f0, voiced): (Vec<f64>, Vec<bool>) = idx.map(|t| (c.f0[t], c.voiced[t])).unzip();
        PitchContour { f0, voiced, hop_length: c.hop_length, sample_rate: c.sample_rate }
    };
    (
        pick(reference, &mut path.iter().map(|p| p.0)),
        pick(estimate, &mut path.iter().map(|p| p.1)),
    )
}

/// One row of a batch evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceMetrics {
    pub utt_id: String,
    pub report: MetricReport,
}

pub const BATCH_HEADER: [&str; 7] = ["utt_id", "gpe", "vde", "ffe", "mcd_db", "n_frames", "n_both_voiced"];

pub fn write_batch_report<W: Write>(rows: &[UtteranceMetrics], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(BATCH_HEADER)?;
    for row in rows {
        let r = &row.report;
        w.write_record([
            row.utt_id.clone(),
            r.gpe.to_string(),
            r.vde.to_string(),
            r.ffe.to_string(),
            r.mcd_db.to_string(),
            r.n_frames.to_string(),
            r.n_both_voiced.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_batch_report(rows: &[UtteranceMetrics], path: impl AsRef<Path>) -> Result<()> {
    write_batch_report(rows, std::fs::File::create(path)?)
}

/// Mean of each metric over a set of reports; counts are summed.
pub fn average_reports(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("metric reports"));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        gpe: mean(|r| r.gpe),
        vde: mean(|r| r.vde),
        ffe: mean(|r| r.ffe),
        mcd_db: mean(|r| r.mcd_db),
        n_frames: reports.iter().map(|r| r.n_frames).sum(),
        n_both_voiced: reports.iter().map(|r| r.n_both_voiced).sum(),
        n_voicing_errors: reports.iter().map(|r| r.n_voicing_errors).sum(),
        n_gross_errors: reports.iter().map(|r| r.n_gross_errors).sum(),
    })
}
