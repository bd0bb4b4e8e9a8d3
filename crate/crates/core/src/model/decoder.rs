//! Autoregressive mel decoder with location-sensitive attention, gate prediction and postnet.

use candle_core::Tensor;

use super::attention::{AttentionMemory, AttentionState, LocationAttention};
use super::config::ModelConfig;
use super::layers::{dropout, Conv1d, Linear, LstmCell, LstmState, Mode};
use super::params::ParamBuilder;
use crate::error::{Error, Result};

/// Everything the decoder conditions on besides its own previous output.
pub struct DecoderConditioning<'a> {
    /// Text encoding `(batch, symbols, encoder_dim)` and its 0/1 mask.
    pub memory: &'a Tensor,
    pub memory_mask: &'a Tensor,
    /// `(batch, speaker_dim)`.
    pub speaker: &'a Tensor,
    /// Global style vector `(batch, prosody_dim)` broadcast to every step.
    pub style: Option<&'a Tensor>,
    /// Per-frame prosody sequence `(batch, len, prosody_dim)` and mask, attended separately.
    pub prosody_sequence: Option<(&'a Tensor, &'a Tensor)>,
    /// Per-step F0 features `(batch, steps, 2)`.
    pub f0: Option<&'a Tensor>,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub mel_pre: Tensor,
    pub mel_post: Tensor,
    pub gate_logits: Tensor,
    pub text_alignment: Tensor,
    pub prosody_alignment: Option<Tensor>,
}

/// How free-running decoding decides when to stop.
#[derive(Debug, Clone, Copy)]
pub enum StopRule {
    /// Run exactly this many steps and ignore the gate.
    Fixed(usize),
    /// Stop once the gate probability reaches the threshold, or after `max_steps`.
    Gate { threshold: f64, max_steps: usize },
}

#[derive(Debug, Clone)]
pub struct Decoder {
    prenet: [Linear; 2],
    prenet_dropout: f64,
    f0_embedding: Option<[Linear; 2]>,
    attention_rnn: LstmCell,
    attention: LocationAttention,
    prosody_attention: Option<LocationAttention>,
    decoder_rnn: LstmCell,
    projection: Linear,
    gate: Linear,
    postnet: Vec<Conv1d>,
    mel_channels: usize,
    static_width: usize,
    f0_width: usize,
    has_style: bool,
    encoder_dim: usize,
    prosody_dim: usize,
    mel_mean: f64,
    mel_std: f64,
}

struct StepState {
    attention_rnn: LstmState,
    decoder_rnn: LstmState,
    attention: AttentionState,
    prosody: Option<AttentionState>,
    context: Tensor,
    prosody_context: Option<Tensor>,
}

struct Memories {
    text: AttentionMemory,
    prosody: Option<AttentionMemory>,
}

impl Decoder {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let has_style = !cfg.variant.uses_pitch_encoder();
        let has_prosody_attention = cfg.variant.uses_pitch_encoder();
        let f0_width = if cfg.variant.uses_decoder_f0() { cfg.f0_embedding_dim } else { 0 };
        let static_width = cfg.prenet_dim + f0_width + cfg.speaker_dim + if has_style { cfg.prosody_dim } else { 0 };
        let prosody_width = if has_prosody_attention { cfg.prosody_dim } else { 0 };
        let dynamic_width = cfg.encoder_dim + prosody_width;
        let attention_rnn = LstmCell::new(&pb.pp("attention_rnn"), static_width + dynamic_width, cfg.attention_rnn_dim)?;
        let attention = LocationAttention::new(
            &pb.pp("attention"),
            cfg.attention_rnn_dim,
            cfg.encoder_dim,
            cfg.attention_dim,
            cfg.location_filters,
            cfg.location_kernel,
        )?;
        let prosody_attention = if has_prosody_attention {
            Some(LocationAttention::new(
                &pb.pp("prosody_attention"),
                cfg.attention_rnn_dim,
                cfg.prosody_dim,
                cfg.attention_dim,
                cfg.location_filters,
                cfg.location_kernel,
            )?)
        } else {
            None
        };
        let decoder_rnn = LstmCell::new(&pb.pp("decoder_rnn"), cfg.attention_rnn_dim + dynamic_width, cfg.decoder_rnn_dim)?;
        let out_in = cfg.decoder_rnn_dim + cfg.encoder_dim + f0_width;
        let mut postnet = Vec::with_capacity(cfg.postnet_layers);
        for i in 0..cfg.postnet_layers {
            let cin = if i == 0 { cfg.mel_channels } else { cfg.postnet_dim };
            let cout = if i + 1 == cfg.postnet_layers { cfg.mel_channels } else { cfg.postnet_dim };
            postnet.push(Conv1d::new(&pb.pp(&format!("postnet{i}")), cin, cout, cfg.postnet_kernel, 1)?);
        }
        Ok(Self {
            prenet: [
                Linear::new(&pb.pp("prenet0"), cfg.mel_channels, cfg.prenet_dim)?,
                Linear::new(&pb.pp("prenet1"), cfg.prenet_dim, cfg.prenet_dim)?,
            ],
            prenet_dropout: cfg.prenet_dropout,
            f0_embedding: if f0_width > 0 {
                Some([
                    Linear::new(&pb.pp("f0_embedding0"), 2, f0_width)?,
                    Linear::new(&pb.pp("f0_embedding1"), f0_width, f0_width)?,
                ])
            } else {
                None
            },
            attention_rnn,
            attention,
            prosody_attention,
            decoder_rnn,
            projection: Linear::new(&pb.pp("projection"), out_in, cfg.mel_channels)?,
            gate: Linear::new(&pb.pp("gate"), out_in, 1)?,
            postnet,
            mel_channels: cfg.mel_channels,
            static_width,
            f0_width,
            has_style,
            encoder_dim: cfg.encoder_dim,
            prosody_dim: prosody_width,
            mel_mean: cfg.mel_mean,
            mel_std: cfg.mel_std,
        })
    }

    fn prenet(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.prenet {
            h = dropout(&layer.forward(&h)?.relu()?, self.prenet_dropout, mode)?;
        }
        Ok(h)
    }

    /// Per-step F0 features `(batch, steps, 2)` to `(batch, steps, f0_width)`.
    fn embed_f0(&self, f0: Option<&Tensor>) -> Result<Option<Tensor>> {
        match (&self.f0_embedding, f0) {
            (Some([a, b]), Some(f)) => Ok(Some(b.forward(&a.forward(f)?.tanh()?)?.tanh()?)),
            _ => Ok(None),
        }
    }

    fn check_conditioning(&self, cond: &DecoderConditioning<'_>) -> Result<()> {
        if (self.f0_width > 0) != cond.f0.is_some() {
            return Err(Error::VariantContract(if self.f0_width > 0 {
                "this variant needs per-frame F0 at the decoder".into()
            } else {
                "this variant does not accept F0 at the decoder".into()
            }));
        }
        if self.has_style != cond.style.is_some() {
            return Err(Error::VariantContract("global style vector presence does not match the variant".into()));
        }
        if self.prosody_attention.is_some() != cond.prosody_sequence.is_some() {
            return Err(Error::VariantContract("prosody sequence presence does not match the variant".into()));
        }
        Ok(())
    }

    /// Concatenates the per-step inputs known before decoding: prenet output, F0, speaker, style.
    fn static_inputs(&self, prenet: &Tensor, f0: Option<Tensor>, cond: &DecoderConditioning<'_>) -> Result<Tensor> {
        let (b, t, _) = prenet.dims3()?;
        let mut parts = vec![prenet.clone()];
        if let Some(f) = f0 {
            parts.push(f);
        }
        parts.push(cond.speaker.unsqueeze(1)?.broadcast_as((b, t, cond.speaker.dim(1)?))?);
        if let Some(s) = cond.style {
            parts.push(s.unsqueeze(1)?.broadcast_as((b, t, s.dim(1)?))?);
        }
        Ok(Tensor::cat(&parts, 2)?)
    }

    fn initial_state(&self, memories: &Memories, like: &Tensor) -> Result<StepState> {
        let b = like.dim(0)?;
        let dtype = like.dtype();
        let device = like.device();
        Ok(StepState {
            attention_rnn: self.attention_rnn.zero_state(b, like)?,
            decoder_rnn: self.decoder_rnn.zero_state(b, like)?,
            attention: self.attention.initial_state(&memories.text)?,
            prosody: match (&self.prosody_attention, &memories.prosody) {
                (Some(a), Some(m)) => Some(a.initial_state(m)?),
                _ => None,
            },
            context: Tensor::zeros((b, self.encoder_dim), dtype, device)?,
            prosody_context: if self.prosody_dim > 0 { Some(Tensor::zeros((b, self.prosody_dim), dtype, device)?) } else { None },
        })
    }

    fn memories(&self, cond: &DecoderConditioning<'_>) -> Result<Memories> {
        Ok(Memories {
            text: self.attention.prepare(cond.memory, cond.memory_mask)?,
            prosody: match (&self.prosody_attention, cond.prosody_sequence) {
                (Some(a), Some((seq, mask))) => Some(a.prepare(seq, mask)?),
                _ => None,
            },
        })
    }

    fn dynamic(context: &Tensor, prosody_context: &Option<Tensor>) -> Result<Tensor> {
        Ok(match prosody_context {
            Some(p) => Tensor::cat(&[context, p], 1)?,
            None => context.clone(),
        })
    }

    /// One step given the projected static gates. Returns `(decoder_h, context)`.
    fn step(&self, static_gates: &Tensor, memories: &Memories, s: &mut StepState) -> Result<(Tensor, Tensor)> {
        let dynamic = Self::dynamic(&s.context, &s.prosody_context)?;
        let gates = (static_gates + self.attention_rnn.project_input(&dynamic, self.static_width, false)?)?;
        s.attention_rnn = self.attention_rnn.step(&gates, &s.attention_rnn)?;
        let query = &s.attention_rnn.h;
        let (context, att) = self.attention.step(query, &memories.text, &s.attention)?;
        s.context = context;
        s.attention = att;
        if let (Some(pa), Some(pm), Some(ps)) = (&self.prosody_attention, &memories.prosody, &s.prosody) {
            let (pc, next) = pa.step(query, pm, ps)?;
            s.prosody_context = Some(pc);
            s.prosody = Some(next);
        }
        let dec_in = Tensor::cat(&[query, &Self::dynamic(&s.context, &s.prosody_context)?], 1)?;
        let dec_gates = self.decoder_rnn.project_input(&dec_in, 0, true)?;
        s.decoder_rnn = self.decoder_rnn.step(&dec_gates, &s.decoder_rnn)?;
        Ok((s.decoder_rnn.h.clone(), s.context.clone()))
    }

    fn normalize(&self, mel: &Tensor) -> Result<Tensor> {
        Ok(mel.affine(1.0 / self.mel_std, -self.mel_mean / self.mel_std)?)
    }

    fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.affine(self.mel_std, self.mel_mean)?)
    }

    /// Normalized `(pre, post)` to log-mel `(pre, post)`.
    fn refine(&self, pre: &Tensor, frame_mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let post = self.postnet(pre, frame_mask)?;
        Ok((self.denormalize(pre)?, self.denormalize(&post)?))
    }

    fn postnet(&self, mel_pre: &Tensor, frame_mask: Option<&Tensor>) -> Result<Tensor> {
        // Padded frames are zeroed before every layer, so valid frames see exactly what
        // they would see unbatched.
        let mask = frame_mask.map(|m| m.unsqueeze(1)).transpose()?;
        let zero_pad = |x: Tensor| -> Result<Tensor> {
            match &mask {
                Some(m) => Ok(x.broadcast_mul(m)?),
                None => Ok(x),
            }
        };
        let mut x = zero_pad(mel_pre.transpose(1, 2)?.contiguous()?)?;
        let last = self.postnet.len().saturating_sub(1);
        for (i, conv) in self.postnet.iter().enumerate() {
            x = conv.forward(&x)?;
            if i < last {
                x = zero_pad(x.tanh()?)?;
            }
        }
        Ok((mel_pre + x.transpose(1, 2)?)?)
    }

    /// Teacher-forced decoding over `target` `(batch, frames, mel_channels)`.
    pub fn teacher_forced(
        &self,
        cond: &DecoderConditioning<'_>,
        target: &Tensor,
        frame_mask: &Tensor,
        mode: &mut Mode<'_>,
    ) -> Result<DecoderOutput> {
        self.check_conditioning(cond)?;
        let (b, t, c) = target.dims3()?;
        if c != self.mel_channels {
            return Err(Error::DimensionMismatch { left: c, right: self.mel_channels });
        }
        if t == 0 {
            return Err(Error::EmptyInput("target mel"));
        }
        if let Some(f0) = cond.f0 {
            if f0.dim(1)? != t {
                return Err(Error::LengthMismatch { left: f0.dim(1)?, right: t });
            }
        }
        let go = Tensor::zeros((b, 1, c), target.dtype(), target.device())?;
        let previous = Tensor::cat(&[&go, &self.normalize(&target.narrow(1, 0, t - 1)?)?], 1)?;
        let prenet = self.prenet(&previous, mode)?;
        let f0 = self.embed_f0(cond.f0)?;
        let static_in = self.static_inputs(&prenet, f0.clone(), cond)?;
        let static_gates = self.attention_rnn.project_input(&static_in, 0, true)?;

        let memories = self.memories(cond)?;
        let mut state = self.initial_state(&memories, target)?;
        let mut outputs = Vec::with_capacity(t);
        let mut alignments = Vec::with_capacity(t);
        let mut prosody_alignments = Vec::with_capacity(t);
        for step in 0..t {
            let gates = static_gates.narrow(1, step, 1)?.squeeze(1)?;
            let (h, context) = self.step(&gates, &memories, &mut state)?;
            outputs.push(Tensor::cat(&[h, context], 1)?);
            alignments.push(state.attention.weights.clone());
            if let Some(p) = &state.prosody {
                prosody_alignments.push(p.weights.clone());
            }
        }
        let mut out_in = Tensor::stack(&outputs, 1)?;
        if let Some(f) = &f0 {
            out_in = Tensor::cat(&[&out_in, f], 2)?;
        }
        let pre = self.projection.forward(&out_in)?;
        let gate_logits = self.gate.forward(&out_in)?.squeeze(2)?;
        let (mel_pre, mel_post) = self.refine(&pre, Some(frame_mask))?;
        Ok(DecoderOutput {
            mel_pre,
            mel_post,
            gate_logits,
            text_alignment: Tensor::stack(&alignments, 1)?,
            prosody_alignment: if prosody_alignments.is_empty() { None } else { Some(Tensor::stack(&prosody_alignments, 1)?) },
        })
    }

    /// Free-running decoding for a batch of one.
    pub fn free_running(&self, cond: &DecoderConditioning<'_>, stop: StopRule) -> Result<DecoderOutput> {
        self.check_conditioning(cond)?;
        let like = cond.memory;
        if like.dim(0)? != 1 {
            return Err(Error::InvalidArgument("free-running decoding takes a single utterance".into()));
        }
        let max_steps = match stop {
            StopRule::Fixed(n) => n,
            StopRule::Gate { max_steps, .. } => max_steps,
        };
        if max_steps == 0 {
            return Err(Error::InvalidArgument("decoder step limit must be positive".into()));
        }
        if let (Some(f0), StopRule::Fixed(n)) = (cond.f0, stop) {
            if f0.dim(1)? != n {
                return Err(Error::LengthMismatch { left: f0.dim(1)?, right: n });
            }
        }
        let memories = self.memories(cond)?;
        let mut state = self.initial_state(&memories, like)?;
        let mut previous = Tensor::zeros((1, 1, self.mel_channels), like.dtype(), like.device())?;
        let mut mels = Vec::new();
        let mut gates = Vec::new();
        let mut alignments = Vec::new();
        let mut prosody_alignments = Vec::new();
        for step in 0..max_steps {
            let prenet = self.prenet(&previous, &mut Mode::Eval)?;
            let f0 = match cond.f0 {
                Some(f) => Some(f.narrow(1, step.min(f.dim(1)? - 1), 1)?),
                None => None,
            };
            let f0 = self.embed_f0(f0.as_ref())?;
            let static_in = self.static_inputs(&prenet, f0.clone(), cond)?;
            let static_gates = self.attention_rnn.project_input(&static_in, 0, true)?.squeeze(1)?;
            let (h, context) = self.step(&static_gates, &memories, &mut state)?;
            let out_in = match &f0 {
                Some(f) => Tensor::cat(&[h, context, f.squeeze(1)?], 1)?,
                None => Tensor::cat(&[h, context], 1)?,
            };
            let mel = self.projection.forward(&out_in)?;
            let gate = self.gate.forward(&out_in)?.squeeze(1)?;
            alignments.push(state.attention.weights.clone());
            if let Some(p) = &state.prosody {
                prosody_alignments.push(p.weights.clone());
            }
            previous = mel.unsqueeze(1)?;
            mels.push(mel);
            let g = gate.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?[0];
            gates.push(gate);
            if let StopRule::Gate { threshold, .. } = stop {
                if 1.0 / (1.0 + (-g).exp()) >= threshold {
                    break;
                }
            }
        }
        let (mel_pre, mel_post) = self.refine(&Tensor::stack(&mels, 1)?, None)?;
        Ok(DecoderOutput {
            mel_pre,
            mel_post,
            gate_logits: Tensor::stack(&gates, 1)?,
            text_alignment: Tensor::stack(&alignments, 1)?,
            prosody_alignment: if prosody_alignments.is_empty() { None } else { Some(Tensor::stack(&prosody_alignments, 1)?) },
        })
    }
}
