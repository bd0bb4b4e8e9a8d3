//! The three transfer architectures: a style-token baseline (`Gst`), decoder-side F0
//! conditioning (`Hard`) and a pitch-only prosody encoder attended by the decoder (`Soft`).
//! All share the text encoder, speaker table, attention decoder and the adversarial
//! speaker classifier fed through gradient reversal.

mod attention;
mod batch;
mod checkpoint;
mod config;
mod decoder;
mod encoders;
mod grl;
pub mod layers;
mod loss;
mod params;
mod vocab;

use std::collections::HashMap;

use candle_core::{Tensor, Var};
pub use candle_core::{DType, Device};

pub use attention::{AttentionMemory, AttentionState, LocationAttention};
pub use batch::{mel_tensor, text_tensor, Example, ModelBatch, Reference};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Variant};
pub use decoder::{Decoder, DecoderConditioning, DecoderOutput, StopRule};
pub use encoders::{f0_features, PitchEncoder, ReferenceEncoder, StyleTokenLayer, TextEncoder};
pub use grl::gradient_reversal;
pub use layers::{masked_mean, Mode};
pub use loss::{compute_loss, LossTerms};
pub use params::{Init, ParamBuilder};
pub use vocab::{PhonemeSequence, Vocabulary, EOS, EOS_ID, PAD, PAD_ID};

use crate::error::{Error, Result};
use crate::pitch::PitchContour;
use crate::spectral::MelSpectrogram;
use layers::{length_mask, Linear};

/// Prosody embedding r: one vector for the style-token variants, one per reference frame for `Soft`.
#[derive(Debug, Clone)]
pub struct ProsodyEmbedding {
    /// `(batch, len, prosody_dim)`.
    pub vectors: Tensor,
    /// `(batch, len)` of 0/1.
    pub mask: Tensor,
    /// Style-token attention `(batch, heads, n_tokens)`; absent for `Soft`.
    pub token_weights: Option<Tensor>,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `(batch, frames, mel_channels)` before the postnet.
    pub mel_pre: Tensor,
    /// `(batch, frames, mel_channels)` after the residual postnet.
    pub mel_post: Tensor,
    /// `(batch, frames)`.
    pub gate_logits: Tensor,
    /// `(batch, frames, symbols)`.
    pub text_attention: Tensor,
    /// `(batch, frames, reference_frames)` for `Soft`.
    pub prosody_attention: Option<Tensor>,
    pub prosody: ProsodyEmbedding,
    /// `(batch, n_speakers)`.
    pub speaker_logits: Tensor,
}

impl ModelOutput {
    pub fn gate_probabilities(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.gate_logits)?)
    }

    pub fn n_frames(&self) -> usize {
        self.mel_post.dim(1).unwrap_or(0)
    }

    /// Post-net mel of batch item `index` as a host spectrogram.
    pub fn mel_spectrogram(&self, index: usize, hop_length: usize, sample_rate: u32) -> Result<MelSpectrogram> {
        let m = self.mel_post.get(index)?.to_dtype(DType::F32)?;
        let (t, c) = m.dims2()?;
        MelSpectrogram::new(m.flatten_all()?.to_vec1::<f32>()?, t, c, hop_length, sample_rate)
    }
}

/// Speaker classifier: pooled r, optional gradient reversal, two-layer MLP.
#[derive(Debug, Clone)]
struct SpeakerClassifier {
    hidden: Linear,
    output: Linear,
}

/// One free-running synthesis request for a single utterance.
#[derive(Debug, Clone, Copy)]
pub struct InferenceRequest<'a> {
    pub text: &'a PhonemeSequence,
    pub speaker: u32,
    /// Reference mel for the style-token path (`Gst`, `Hard`).
    pub reference_mel: Option<&'a MelSpectrogram>,
    /// Reference contour for the pitch encoder (`Soft`).
    pub reference_f0: Option<&'a PitchContour>,
    /// Conditioning contour fed frame by frame to the decoder (`Hard` only).
    pub decoder_f0: Option<&'a PitchContour>,
}

pub struct ProsodyModel {
    cfg: ModelConfig,
    params: ParamBuilder,
    text_encoder: TextEncoder,
    speaker_table: Tensor,
    reference_encoder: Option<ReferenceEncoder>,
    style_tokens: Option<StyleTokenLayer>,
    pitch_encoder: Option<PitchEncoder>,
    decoder: Decoder,
    classifier: SpeakerClassifier,
}

impl ProsodyModel {
    /// A freshly initialized model; the same seed always gives the same parameters.
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::build(cfg, ParamBuilder::seeded(seed, dtype, device))
    }

    /// A model whose parameters are taken from `tensors` (e.g. a checkpoint).
    pub fn from_tensors(cfg: ModelConfig, tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Result<Self> {
        let expected = tensors.len();
        let model = Self::build(cfg, ParamBuilder::from_tensors(tensors, dtype, device))?;
        if model.params.vars().len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {expected} tensors but the model uses {}",
                model.params.vars().len()
            )));
        }
        Ok(model)
    }

    fn build(cfg: ModelConfig, pb: ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let text_encoder = TextEncoder::new(
            &pb.pp("text_encoder"),
            cfg.n_symbols,
            cfg.symbol_dim,
            cfg.encoder_conv_layers,
            cfg.encoder_kernel,
            cfg.encoder_dim,
        )?;
        let speaker_table = pb.get(&[cfg.n_speakers, cfg.speaker_dim], "speaker_table", Init::Uniform(0.5))?;
        let (reference_encoder, style_tokens, pitch_encoder) = if cfg.variant.uses_pitch_encoder() {
            let pe = PitchEncoder::new(&pb.pp("pitch_encoder"), cfg.pitch_encoder_channels, cfg.pitch_encoder_kernel, cfg.prosody_dim)?;
            (None, None, Some(pe))
        } else {
            let re = ReferenceEncoder::new(&pb.pp("reference_encoder"), cfg.mel_channels, cfg.reference_channels, cfg.reference_rnn_dim)?
                .with_normalization(cfg.mel_mean, cfg.mel_std);
            let st = StyleTokenLayer::new(&pb.pp("style_tokens"), cfg.reference_rnn_dim, cfg.n_tokens, cfg.token_heads, cfg.prosody_dim)?;
            (Some(re), Some(st), None)
        };
        let decoder = Decoder::new(&pb.pp("decoder"), &cfg)?;
        let classifier = SpeakerClassifier {
            hidden: Linear::new(&pb.pp("classifier.hidden"), cfg.prosody_dim, cfg.classifier_hidden)?,
            output: Linear::zeros(&pb.pp("classifier.output"), cfg.classifier_hidden, cfg.n_speakers)?,
        };
        Ok(Self { cfg, params: pb, text_encoder, speaker_table, reference_encoder, style_tokens, pitch_encoder, decoder, classifier })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Trainable parameters by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.params.vars()
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_parameters()
    }

    /// Changes the adversarial settings without touching parameters.
    pub fn set_adversarial(&mut self, lambda: f64, reverse_gradient: bool) -> Result<()> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be non-negative, got {lambda}")));
        }
        self.cfg.lambda = lambda;
        self.cfg.reverse_speaker_gradient = reverse_gradient;
        Ok(())
    }

    pub fn style_tokens(&self) -> Option<&StyleTokenLayer> {
        self.style_tokens.as_ref()
    }

    /// Text encoding `(batch, symbols, encoder_dim)` with padded positions zeroed.
    pub fn encode_text(&self, ids: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        if lengths.iter().any(|&l| l == 0) {
            return Err(Error::EmptyInput("phoneme sequence"));
        }
        self.text_encoder.forward(ids, lengths)
    }

    /// Prosody embedding r for the variant's reference type.
    pub fn encode_prosody(&self, reference: &Reference) -> Result<ProsodyEmbedding> {
        match (reference, &self.reference_encoder, &self.style_tokens, &self.pitch_encoder) {
            (Reference::Mel { mel, lengths }, Some(re), Some(st), _) => {
                if lengths.iter().any(|&l| l == 0) {
                    return Err(Error::EmptyInput("reference mel"));
                }
                let summary = re.forward(mel, lengths)?;
                let (style, weights) = st.forward(&summary)?;
                let b = style.dim(0)?;
                Ok(ProsodyEmbedding {
                    vectors: style.unsqueeze(1)?,
                    mask: Tensor::ones((b, 1), style.dtype(), style.device())?,
                    token_weights: Some(weights),
                })
            }
            (Reference::Pitch { features, mask, lengths }, _, _, Some(pe)) => {
                if lengths.iter().any(|&l| l == 0) {
                    return Err(Error::EmptyInput("reference pitch contour"));
                }
                Ok(ProsodyEmbedding { vectors: pe.forward(features, mask)?, mask: mask.clone(), token_weights: None })
            }
            (Reference::Mel { .. }, ..) => Err(Error::VariantContract(format!(
                "the {} variant encodes a pitch contour, not a mel reference",
                self.cfg.variant
            ))),
            (Reference::Pitch { .. }, ..) => Err(Error::VariantContract(format!(
                "the {} variant encodes a mel reference, not a pitch contour",
                self.cfg.variant
            ))),
        }
    }

    /// Speaker logits `(batch, n_speakers)` from r, mean-pooled over its valid positions.
    pub fn classify_speaker(&self, prosody: &ProsodyEmbedding) -> Result<Tensor> {
        let pooled = masked_mean(&prosody.vectors, &prosody.mask)?;
        let x = if self.cfg.reverse_speaker_gradient { gradient_reversal(&pooled)? } else { pooled };
        let h = self.classifier.hidden.forward(&x)?.relu()?;
        self.classifier.output.forward(&h)
    }

    fn speaker_vectors(&self, speakers: &Tensor) -> Result<Tensor> {
        let ids = speakers.to_vec1::<u32>()?;
        if let Some(&bad) = ids.iter().find(|&&s| s as usize >= self.cfg.n_speakers) {
            return Err(Error::InvalidArgument(format!(
                "speaker index {bad} out of range for {} speakers",
                self.cfg.n_speakers
            )));
        }
        Ok(self.speaker_table.index_select(speakers, 0)?)
    }

    /// Teacher-forced pass over a batch; the reference is encoded from the batch itself.
    pub fn forward(&self, batch: &ModelBatch, mode: &mut Mode<'_>) -> Result<ModelOutput> {
        let prosody = self.encode_prosody(&batch.reference)?;
        self.forward_with_prosody(batch, prosody, mode)
    }

    /// Teacher-forced pass with an externally supplied prosody embedding.
    pub fn forward_with_prosody(&self, batch: &ModelBatch, prosody: ProsodyEmbedding, mode: &mut Mode<'_>) -> Result<ModelOutput> {
        let memory = self.encode_text(&batch.text, &batch.text_lengths)?;
        let n = memory.dim(1)?;
        let memory_mask = length_mask(&batch.text_lengths, n, self.dtype(), self.device())?;
        let speaker = self.speaker_vectors(&batch.speakers)?;
        let style = if self.cfg.variant.uses_pitch_encoder() { None } else { Some(prosody.vectors.squeeze(1)?) };
        let cond = DecoderConditioning {
            memory: &memory,
            memory_mask: &memory_mask,
            speaker: &speaker,
            style: style.as_ref(),
            prosody_sequence: if self.cfg.variant.uses_pitch_encoder() { Some((&prosody.vectors, &prosody.mask)) } else { None },
            f0: batch.decoder_f0.as_ref(),
        };
        let out = self.decoder.teacher_forced(&cond, &batch.target_mel, &batch.frame_mask, mode)?;
        let speaker_logits = self.classify_speaker(&prosody)?;
        Ok(ModelOutput {
            mel_pre: out.mel_pre,
            mel_post: out.mel_post,
            gate_logits: out.gate_logits,
            text_attention: out.text_alignment,
            prosody_attention: out.prosody_alignment,
            prosody,
            speaker_logits,
        })
    }

    /// Free-running synthesis. `Hard` runs exactly one step per conditioning F0 frame and
    /// ignores the gate; the other variants stop on the gate or the per-symbol step cap.
    pub fn infer(&self, req: &InferenceRequest<'_>) -> Result<ModelOutput> {
        let variant = self.cfg.variant;
        if !variant.uses_decoder_f0() && req.decoder_f0.is_some() {
            return Err(Error::VariantContract(format!("the {variant} variant does not accept decoder F0")));
        }
        let reference = match variant {
            Variant::Gst | Variant::Hard => {
                let mel = req
                    .reference_mel
                    .ok_or_else(|| Error::VariantContract(format!("the {variant} variant needs a reference mel")))?;
                if mel.n_frames == 0 {
                    return Err(Error::EmptyInput("reference mel"));
                }
                Reference::from_mels(&[mel], self.dtype(), self.device())?
            }
            Variant::Soft => {
                let c = req
                    .reference_f0
                    .ok_or_else(|| Error::VariantContract("the soft variant needs a reference contour".into()))?;
                Reference::from_contours(&[c], self.cfg.f0_reference_hz, self.dtype(), self.device())?
            }
        };
        let prosody = self.encode_prosody(&reference)?;
        let (ids, lengths) = text_tensor(&[req.text], self.device())?;
        let memory = self.encode_text(&ids, &lengths)?;
        let memory_mask = length_mask(&lengths, memory.dim(1)?, self.dtype(), self.device())?;
        let speakers = Tensor::from_vec(vec![req.speaker], 1, self.device())?;
        let speaker = self.speaker_vectors(&speakers)?;
        let (f0, stop) = if variant.uses_decoder_f0() {
            let c = req
                .decoder_f0
                .ok_or_else(|| Error::VariantContract("the hard variant needs a decoder F0 contour".into()))?;
            if c.is_empty() {
                return Err(Error::EmptyInput("decoder F0 contour"));
            }
            let rows = vec![f0_features(&c.f0, &c.voiced, self.cfg.f0_reference_hz)];
            (Some(encoders::features_tensor(&rows, c.len(), self.dtype(), self.device())?), StopRule::Fixed(c.len()))
        } else {
            let max_steps = self.cfg.max_steps_per_symbol * req.text.len();
            (None, StopRule::Gate { threshold: self.cfg.gate_threshold, max_steps })
        };
        let style = if variant.uses_pitch_encoder() { None } else { Some(prosody.vectors.squeeze(1)?) };
        let cond = DecoderConditioning {
            memory: &memory,
            memory_mask: &memory_mask,
            speaker: &speaker,
            style: style.as_ref(),
            prosody_sequence: if variant.uses_pitch_encoder() { Some((&prosody.vectors, &prosody.mask)) } else { None },
            f0: f0.as_ref(),
        };
        let out = self.decoder.free_running(&cond, stop)?;
        let speaker_logits = self.classify_speaker(&prosody)?;
        Ok(ModelOutput {
            mel_pre: out.mel_pre,
            mel_post: out.mel_post,
            gate_logits: out.gate_logits,
            text_attention: out.text_alignment,
            prosody_attention: out.prosody_alignment,
            prosody,
            speaker_logits,
        })
    }
}
