//! Inference-time prosody transfer: parallel transfer for `Hard`, non-parallel transfer for
//! `Soft` and `Gst`, pitch manipulation before conditioning, output bundles and figures.

mod figure;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use figure::{emit_pitch_figure, read_figure_csv, write_figure_csv, FigureFiles, FIGURE_CSV_HEADER};

use crate::audio::{write_waveform, WavEncoding, Waveform};
use crate::error::{Error, Result};
use crate::model::{CheckpointMeta, InferenceRequest, ModelOutput, PhonemeSequence, ProsodyModel, Variant};
use crate::pitch::{extract_f0, fit_vocal_range, scale_pitch, F0Config, PitchContour, VocalRangeStats};
use crate::spectral::{mel_spectrogram, reconstruct_waveform, MelSpectrogram, StftConfig};

/// Hard transfer needs at least this many reference frames.
pub const MIN_REFERENCE_FRAMES: usize = 5;

pub const BUNDLE_FILES: [&str; 5] = ["out.wav", "mel.bin", "f0.csv", "attention.csv", "transform.json"];

/// A manipulation applied to the reference contour before it conditions the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PitchTransform {
    /// Multiply voiced frames by `factor`.
    Scale { factor: f64 },
    /// Map the reference's log-F0 statistics onto `target`.
    FitVocalRange { target: VocalRangeStats, match_std: bool },
    /// Use `contour` instead of the reference contour.
    Replace { contour: PitchContour },
}

/// The exact transform applied, with everything needed to replay it on the raw reference contour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub transform: Option<PitchTransform>,
    /// Statistics of the raw reference contour (the source side of a vocal-range fit).
    pub source_stats: VocalRangeStats,
    pub reference_frames: usize,
    pub conditioning_frames: usize,
}

impl TransformRecord {
    /// Applies the recorded transform to `raw`.
    pub fn replay(&self, raw: &PitchContour) -> Result<PitchContour> {
        match &self.transform {
            None => Ok(raw.clone()),
            Some(PitchTransform::Scale { factor }) => scale_pitch(raw, *factor),
            Some(PitchTransform::FitVocalRange { target, match_std }) => fit_vocal_range(raw, &self.source_stats, target, *match_std),
            Some(PitchTransform::Replace { contour }) => Ok(contour.clone()),
        }
    }
}

/// Builds the conditioning contour from the raw reference contour.
pub fn apply_transform(raw: &PitchContour, transform: Option<&PitchTransform>) -> Result<(PitchContour, TransformRecord)> {
    let record = TransformRecord {
        transform: transform.cloned(),
        source_stats: VocalRangeStats::from_contour(raw),
        reference_frames: raw.len(),
        conditioning_frames: 0,
    };
    let out = record.replay(raw)?;
    if out.is_empty() {
        return Err(Error::EmptyInput("conditioning contour"));
    }
    Ok((out.clone(), TransformRecord { conditioning_frames: out.len(), ..record }))
}

#[derive(Debug, Clone)]
pub struct TransferRequest {
    pub text: PhonemeSequence,
    pub reference_audio: Waveform,
    pub speaker: u32,
    pub pitch_transform: Option<PitchTransform>,
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub variant: Variant,
    pub waveform: Waveform,
    /// Postnet output.
    pub mel: MelSpectrogram,
    /// F0 re-extracted from `waveform`; one value per mel frame.
    pub output_f0: PitchContour,
    pub reference_f0: PitchContour,
    /// What the model was conditioned on (`Hard`: decoder input; `Soft`: prosody encoder input).
    pub conditioning_f0: Option<PitchContour>,
    /// `frames x symbols`.
    pub text_attention: Vec<Vec<f32>>,
    /// `frames x reference frames` (`Soft`).
    pub prosody_attention: Option<Vec<Vec<f32>>>,
    /// `heads x tokens` (`Gst`, `Hard`).
    pub token_weights: Option<Vec<Vec<f32>>>,
    /// Global style vector (`Gst`, `Hard`).
    pub style_embedding: Option<Vec<f32>>,
    pub transform: TransformRecord,
}

/// A loaded model plus the analysis and vocoder settings used at inference.
pub struct Synthesizer {
    pub model: ProsodyModel,
    pub meta: CheckpointMeta,
    pub stft: StftConfig,
    pub f0: F0Config,
    pub vocoder_iterations: usize,
    pub vocoder_seed: u64,
    pub speaker_stats: BTreeMap<String, VocalRangeStats>,
}

impl Synthesizer {
    pub fn new(model: ProsodyModel, meta: CheckpointMeta) -> Self {
        let stft = StftConfig::default();
        Self {
            model,
            meta,
            f0: F0Config::aligned_with(&stft),
            stft,
            vocoder_iterations: 60,
            vocoder_seed: 0,
            speaker_stats: BTreeMap::new(),
        }
    }

    /// Vocal-range fit onto the stored statistics of `speaker`.
    pub fn vocal_range_transform(&self, speaker: &str, match_std: bool) -> Result<PitchTransform> {
        let target = *self.speaker_stats.get(speaker).ok_or_else(|| Error::UnknownSpeaker(speaker.to_string()))?;
        if !target.is_valid() {
            return Err(Error::DegenerateStats(format!("speaker {speaker} has no voiced frames")));
        }
        Ok(PitchTransform::FitVocalRange { target, match_std })
    }

    /// Dispatches on the model variant.
    pub fn transfer(&self, req: &TransferRequest) -> Result<TransferResult> {
        match self.model.variant() {
            Variant::Hard => transfer_hard(self, req),
            Variant::Soft => transfer_soft(self, req),
            Variant::Gst => transfer_gst(self, req),
        }
    }

    fn vocode(&self, out: &ModelOutput) -> Result<(MelSpectrogram, Waveform, PitchContour)> {
        let mel = out.mel_spectrogram(0, self.stft.hop_length, self.stft.sample_rate)?;
        let wave = reconstruct_waveform(&mel, &self.stft, self.vocoder_iterations, self.vocoder_seed)?;
        let f0 = extract_f0(&wave, &self.f0)?;
        Ok((mel, wave, f0))
    }

    fn finish(
        &self,
        out: ModelOutput,
        reference_f0: PitchContour,
        conditioning_f0: Option<PitchContour>,
        transform: TransformRecord,
    ) -> Result<TransferResult> {
        let (mel, waveform, output_f0) = self.vocode(&out)?;
        if output_f0.len() != mel.n_frames {
            return Err(Error::LengthMismatch { left: output_f0.len(), right: mel.n_frames });
        }
        let first = |t: &Tensor| -> Result<Tensor> { Ok(t.get(0)?.to_dtype(DType::F32)?) };
        let matrix = |t: &Tensor| -> Result<Vec<Vec<f32>>> { Ok(first(t)?.to_vec2()?) };
        Ok(TransferResult {
            variant: self.model.variant(),
            waveform,
            mel,
            output_f0,
            reference_f0,
            conditioning_f0,
            text_attention: matrix(&out.text_attention)?,
            prosody_attention: out.prosody_attention.as_ref().map(matrix).transpose()?,
            token_weights: out.prosody.token_weights.as_ref().map(matrix).transpose()?,
            style_embedding: if self.model.variant().uses_pitch_encoder() {
                None
            } else {
                Some(first(&out.prosody.vectors)?.squeeze(0)?.to_vec1()?)
            },
            transform,
        })
    }

    fn analyse_reference(&self, audio: &Waveform) -> Result<(MelSpectrogram, PitchContour)> {
        let audio = if audio.sample_rate == self.stft.sample_rate { audio.clone() } else { audio.resampled(self.stft.sample_rate)? };
        Ok((mel_spectrogram(&audio, &self.stft)?, extract_f0(&audio, &self.f0)?))
    }
}

/// Parallel transfer: the (optionally transformed) reference F0 drives the decoder frame by
/// frame for exactly its length.
pub fn transfer_hard(s: &Synthesizer, req: &TransferRequest) -> Result<TransferResult> {
    if s.model.variant() != Variant::Hard {
        return Err(Error::VariantContract(format!("transfer_hard needs a hard model, got {}", s.model.variant())));
    }
    let (ref_mel, raw) = s.analyse_reference(&req.reference_audio)?;
    if raw.len() < MIN_REFERENCE_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "reference has {} frames; at least {MIN_REFERENCE_FRAMES} are required",
            raw.len()
        )));
    }
    let (conditioning, record) = apply_transform(&raw, req.pitch_transform.as_ref())?;
    let out = s.model.infer(&InferenceRequest {
        text: &req.text,
        speaker: req.speaker,
        reference_mel: Some(&ref_mel),
        reference_f0: None,
        decoder_f0: Some(&conditioning),
    })?;
    s.finish(out, raw, Some(conditioning), record)
}

/// Non-parallel transfer from the reference pitch contour alone.
pub fn transfer_soft(s: &Synthesizer, req: &TransferRequest) -> Result<TransferResult> {
    if s.model.variant() != Variant::Soft {
        return Err(Error::VariantContract(format!("transfer_soft needs a soft model, got {}", s.model.variant())));
    }
    let (_, raw) = s.analyse_reference(&req.reference_audio)?;
    if raw.is_empty() {
        return Err(Error::EmptyInput("reference pitch contour"));
    }
    let (conditioning, record) = apply_transform(&raw, req.pitch_transform.as_ref())?;
    let out = s.model.infer(&InferenceRequest {
        text: &req.text,
        speaker: req.speaker,
        reference_mel: None,
        reference_f0: Some(&conditioning),
        decoder_f0: None,
    })?;
    s.finish(out, raw, Some(conditioning), record)
}

/// Non-parallel transfer through a global style embedding of the reference mel.
pub fn transfer_gst(s: &Synthesizer, req: &TransferRequest) -> Result<TransferResult> {
    if s.model.variant() != Variant::Gst {
        return Err(Error::VariantContract(format!("transfer_gst needs a gst model, got {}", s.model.variant())));
    }
    if req.pitch_transform.is_some() {
        return Err(Error::VariantContract("the gst variant has no pitch input to transform".into()));
    }
    let (ref_mel, raw) = s.analyse_reference(&req.reference_audio)?;
    let record = apply_transform(&raw, None)?.1;
    let out = s.model.infer(&InferenceRequest {
        text: &req.text,
        speaker: req.speaker,
        reference_mel: Some(&ref_mel),
        reference_f0: None,
        decoder_f0: None,
    })?;
    s.finish(out, raw, None, record)
}

/// Long-format attention CSV: `matrix,frame,position,weight`.
pub fn write_attention_csv<W: Write>(result: &TransferResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["matrix", "frame", "position", "weight"])?;
    let mut emit = |name: &str, m: &[Vec<f32>]| -> Result<()> {
        for (t, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                w.write_record([name.to_string(), t.to_string(), j.to_string(), v.to_string()])?;
            }
        }
        Ok(())
    };
    emit("text", &result.text_attention)?;
    if let Some(p) = &result.prosody_attention {
        emit("prosody", p)?;
    }
    if let Some(tw) = &result.token_weights {
        emit("tokens", tw)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the five bundle files into `dir` and returns their paths.
pub fn write_bundle(result: &TransferResult, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = BUNDLE_FILES.iter().map(|f| dir.join(f)).collect();
    write_waveform(&paths[0], &result.waveform, WavEncoding::Pcm16)?;
    result.mel.save(&paths[1])?;
    result.output_f0.save_csv(&paths[2])?;
    write_attention_csv(result, std::fs::File::create(&paths[3])?)?;
    std::fs::write(&paths[4], serde_json::to_string_pretty(&result.transform)?)?;
    Ok(paths)
}

pub fn load_transform_record(path: impl AsRef<Path>) -> Result<TransformRecord> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::Parse { path: path.to_path_buf(), reason: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contour() -> PitchContour {
        PitchContour::from_hz(&[0.0, 120.0, 130.0, 0.0, 140.0, 150.0], 256, 22_050)
    }

    #[test]
    fn unit_scale_is_the_identity() {
        let raw = contour();
        let (a, _) = apply_transform(&raw, None).unwrap();
        let (b, rec) = apply_transform(&raw, Some(&PitchTransform::Scale { factor: 1.0 })).unwrap();
        assert_eq!(a, b);
        assert_eq!(rec.conditioning_frames, raw.len());
    }

    #[test]
    fn records_replay_bitwise() {
        let raw = contour();
        let target = VocalRangeStats { log_f0_mean: 5.0, log_f0_std: 0.1, n_voiced_frames: 10 };
        let transforms = [
            PitchTransform::Scale { factor: 0.5 },
            PitchTransform::FitVocalRange { target, match_std: true },
            PitchTransform::FitVocalRange { target, match_std: false },
            PitchTransform::Replace { contour: PitchContour::from_hz(&[100.0, 0.0, 110.0], 256, 22_050) },
        ];
        for t in &transforms {
            let (cond, rec) = apply_transform(&raw, Some(t)).unwrap();
            let json = serde_json::to_string(&rec).unwrap();
            let back: TransformRecord = serde_json::from_str(&json).unwrap();
            assert_eq!(back, rec);
            assert_eq!(back.replay(&raw).unwrap(), cond);
        }
    }

    #[test]
    fn scale_halves_voiced_frames() {
        let (c, _) = apply_transform(&contour(), Some(&PitchTransform::Scale { factor: 0.5 })).unwrap();
        assert_eq!(c.f0, vec![0.0, 60.0, 65.0, 0.0, 70.0, 75.0]);
    }
}
