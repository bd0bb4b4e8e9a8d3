//! Padded tensor batches assembled from host-side features.

use candle_core::{DType, Device, Tensor};

use super::config::{ModelConfig, Variant};
use super::encoders::{f0_features, features_tensor};
use super::layers::length_mask;
use super::vocab::PhonemeSequence;
use crate::error::{Error, Result};
use crate::pitch::PitchContour;
use crate::spectral::MelSpectrogram;

/// One utterance's training features.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub text: &'a PhonemeSequence,
    pub speaker: u32,
    pub mel: &'a MelSpectrogram,
    pub f0: &'a PitchContour,
}

/// The input to the prosody encoder.
#[derive(Debug, Clone)]
pub enum Reference {
    /// `(batch, frames, mel_channels)`.
    Mel { mel: Tensor, lengths: Vec<usize> },
    /// `(batch, frames, 2)` F0 features and their 0/1 mask.
    Pitch { features: Tensor, mask: Tensor, lengths: Vec<usize> },
}

impl Reference {
    pub fn from_mels(mels: &[&MelSpectrogram], dtype: DType, device: &Device) -> Result<Self> {
        let lengths: Vec<usize> = mels.iter().map(|m| m.n_frames).collect();
        Ok(Reference::Mel { mel: mel_tensor(mels, dtype, device)?, lengths })
    }

    pub fn from_contours(contours: &[&PitchContour], f0_reference_hz: f64, dtype: DType, device: &Device) -> Result<Self> {
        if contours.iter().any(|c| c.is_empty()) {
            return Err(Error::EmptyInput("reference pitch contour"));
        }
        let lengths: Vec<usize> = contours.iter().map(|c| c.len()).collect();
        let max = *lengths.iter().max().ok_or(Error::EmptyInput("reference pitch contour"))?;
        let rows: Vec<_> = contours.iter().map(|c| f0_features(&c.f0, &c.voiced, f0_reference_hz)).collect();
        Ok(Reference::Pitch {
            features: features_tensor(&rows, max, dtype, device)?,
            mask: length_mask(&lengths, max, dtype, device)?,
            lengths,
        })
    }

    pub fn lengths(&self) -> &[usize] {
        match self {
            Reference::Mel { lengths, .. } | Reference::Pitch { lengths, .. } => lengths,
        }
    }
}

/// Zero-padded `(batch, max_frames, channels)` tensor.
pub fn mel_tensor(mels: &[&MelSpectrogram], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = mels.first().ok_or(Error::EmptyInput("mel batch"))?;
    let c = first.n_channels;
    let t = mels.iter().map(|m| m.n_frames).max().unwrap_or(0);
    if t == 0 {
        return Err(Error::EmptyInput("mel spectrogram"));
    }
    let mut data = vec![0f32; mels.len() * t * c];
    for (b, m) in mels.iter().enumerate() {
        if m.n_channels != c {
            return Err(Error::DimensionMismatch { left: m.n_channels, right: c });
        }
        data[b * t * c..b * t * c + m.data.len()].copy_from_slice(&m.data);
    }
    Ok(Tensor::from_vec(data, (mels.len(), t, c), device)?.to_dtype(dtype)?)
}

/// Zero-padded `(batch, max_len)` u32 symbol ids.
pub fn text_tensor(texts: &[&PhonemeSequence], device: &Device) -> Result<(Tensor, Vec<usize>)> {
    let lengths: Vec<usize> = texts.iter().map(|t| t.len()).collect();
    let n = *lengths.iter().max().ok_or(Error::EmptyInput("text batch"))?;
    let mut data = vec![0u32; texts.len() * n];
    for (b, t) in texts.iter().enumerate() {
        data[b * n..b * n + t.len()].copy_from_slice(&t.ids);
    }
    Ok((Tensor::from_vec(data, (texts.len(), n), device)?, lengths))
}

/// Teacher-forced training batch. The reference is the utterance itself.
#[derive(Debug, Clone)]
pub struct ModelBatch {
    pub text: Tensor,
    pub text_lengths: Vec<usize>,
    pub speakers: Tensor,
    pub speaker_ids: Vec<u32>,
    pub reference: Reference,
    pub decoder_f0: Option<Tensor>,
    pub target_mel: Tensor,
    pub frame_lengths: Vec<usize>,
    pub frame_mask: Tensor,
    /// 1 from the last real frame on, 0 before.
    pub gate_target: Tensor,
}

impl ModelBatch {
    pub fn new(examples: &[Example<'_>], cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        for ex in examples {
            if ex.f0.len() != ex.mel.n_frames {
                return Err(Error::LengthMismatch { left: ex.f0.len(), right: ex.mel.n_frames });
            }
            if ex.speaker as usize >= cfg.n_speakers {
                return Err(Error::InvalidArgument(format!(
                    "speaker index {} out of range for {} speakers",
                    ex.speaker, cfg.n_speakers
                )));
            }
            if ex.mel.n_channels != cfg.mel_channels {
                return Err(Error::DimensionMismatch { left: ex.mel.n_channels, right: cfg.mel_channels });
            }
        }
        let texts: Vec<_> = examples.iter().map(|e| e.text).collect();
        let (text, text_lengths) = text_tensor(&texts, device)?;
        let mels: Vec<_> = examples.iter().map(|e| e.mel).collect();
        let contours: Vec<_> = examples.iter().map(|e| e.f0).collect();
        let target_mel = mel_tensor(&mels, dtype, device)?;
        let frame_lengths: Vec<usize> = mels.iter().map(|m| m.n_frames).collect();
        let t = target_mel.dim(1)?;
        let frame_mask = length_mask(&frame_lengths, t, dtype, device)?;
        let gate: Vec<f32> = frame_lengths
            .iter()
            .flat_map(|&l| (0..t).map(move |i| if i + 1 >= l { 1.0 } else { 0.0 }))
            .collect();
        let gate_target = Tensor::from_vec(gate, (examples.len(), t), device)?.to_dtype(dtype)?;
        let reference = match cfg.variant {
            Variant::Gst | Variant::Hard => Reference::from_mels(&mels, dtype, device)?,
            Variant::Soft => Reference::from_contours(&contours, cfg.f0_reference_hz, dtype, device)?,
        };
        let decoder_f0 = if cfg.variant.uses_decoder_f0() {
            let rows: Vec<_> = contours.iter().map(|c| f0_features(&c.f0, &c.voiced, cfg.f0_reference_hz)).collect();
            Some(features_tensor(&rows, t, dtype, device)?)
        } else {
            None
        };
        let speaker_ids: Vec<u32> = examples.iter().map(|e| e.speaker).collect();
        Ok(Self {
            text,
            text_lengths,
            speakers: Tensor::from_vec(speaker_ids.clone(), examples.len(), device)?,
            speaker_ids,
            reference,
            decoder_f0,
            target_mel,
            frame_lengths,
            frame_mask,
            gate_target,
        })
    }

    pub fn len(&self) -> usize {
        self.speaker_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speaker_ids.is_empty()
    }
}
