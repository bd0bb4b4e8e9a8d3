use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which prosody path conditions the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Global style tokens over a reference mel spectrogram.
    Gst,
    /// Reference F0 fed frame by frame into the decoder, plus a global style embedding.
    Hard,
    /// Reference F0 encoded to a per-frame prosody sequence attended by the decoder.
    Soft,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Gst => "gst",
            Variant::Hard => "hard",
            Variant::Soft => "soft",
        }
    }

    pub fn uses_decoder_f0(self) -> bool {
        self == Variant::Hard
    }

    pub fn uses_pitch_encoder(self) -> bool {
        self == Variant::Soft
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gst" => Ok(Variant::Gst),
            "hard" => Ok(Variant::Hard),
            "soft" => Ok(Variant::Soft),
            other => Err(Error::InvalidConfig(format!("unknown variant `{other}` (expected gst, hard or soft)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters. The defaults are a toy-scale preset that trains on one CPU core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_symbols: usize,
    pub n_speakers: usize,
    pub mel_channels: usize,

    pub symbol_dim: usize,
    pub encoder_conv_layers: usize,
    pub encoder_kernel: usize,
    /// Width of the text encoding; split evenly between the two recurrent directions.
    pub encoder_dim: usize,

    pub prenet_dim: usize,
    pub prenet_dropout: f64,
    pub attention_rnn_dim: usize,
    pub decoder_rnn_dim: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    pub postnet_dim: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,

    pub speaker_dim: usize,

    pub n_tokens: usize,
    pub token_heads: usize,
    /// Width of the prosody embedding r (style embedding or per-frame pitch encoding).
    pub prosody_dim: usize,
    pub reference_channels: usize,
    pub reference_rnn_dim: usize,
    pub pitch_encoder_channels: usize,
    pub pitch_encoder_kernel: usize,

    pub classifier_hidden: usize,
    /// Adversarial weight on the speaker cross-entropy.
    pub lambda: f64,
    /// When false the classifier receives the ordinary gradient instead of the reversed one.
    pub reverse_speaker_gradient: bool,

    /// Width of the learned F0 embedding fed to the `Hard` decoder.
    pub f0_embedding_dim: usize,
    /// F0 model inputs are `ln(f0 / f0_reference_hz)` on voiced frames.
    pub f0_reference_hz: f64,
    /// Log-mel frames enter the networks as `(mel - mel_mean) / mel_std`; predictions are mapped back.
    pub mel_mean: f64,
    pub mel_std: f64,
    pub gate_threshold: f64,
    /// Free-running decoding stops after this many steps per input symbol.
    pub max_steps_per_symbol: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Hard,
            n_symbols: 16,
            n_speakers: 4,
            mel_channels: 80,
            symbol_dim: 32,
            encoder_conv_layers: 2,
            encoder_kernel: 5,
            encoder_dim: 32,
            prenet_dim: 32,
            prenet_dropout: 0.5,
            attention_rnn_dim: 64,
            decoder_rnn_dim: 64,
            attention_dim: 32,
            location_filters: 8,
            location_kernel: 15,
            postnet_dim: 32,
            postnet_layers: 3,
            postnet_kernel: 5,
            speaker_dim: 8,
            n_tokens: 10,
            token_heads: 2,
            prosody_dim: 16,
            reference_channels: 16,
            reference_rnn_dim: 16,
            pitch_encoder_channels: 16,
            pitch_encoder_kernel: 5,
            classifier_hidden: 16,
            lambda: 0.0,
            reverse_speaker_gradient: true,
            f0_embedding_dim: 16,
            f0_reference_hz: 200.0,
            mel_mean: -2.0,
            mel_std: 4.0,
            gate_threshold: 0.5,
            max_steps_per_symbol: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_symbols", self.n_symbols),
            ("n_speakers", self.n_speakers),
            ("mel_channels", self.mel_channels),
            ("symbol_dim", self.symbol_dim),
            ("encoder_kernel", self.encoder_kernel),
            ("prenet_dim", self.prenet_dim),
            ("attention_rnn_dim", self.attention_rnn_dim),
            ("decoder_rnn_dim", self.decoder_rnn_dim),
            ("attention_dim", self.attention_dim),
            ("location_filters", self.location_filters),
            ("location_kernel", self.location_kernel),
            ("postnet_dim", self.postnet_dim),
            ("postnet_kernel", self.postnet_kernel),
            ("speaker_dim", self.speaker_dim),
            ("n_tokens", self.n_tokens),
            ("token_heads", self.token_heads),
            ("prosody_dim", self.prosody_dim),
            ("reference_channels", self.reference_channels),
            ("reference_rnn_dim", self.reference_rnn_dim),
            ("pitch_encoder_channels", self.pitch_encoder_channels),
            ("pitch_encoder_kernel", self.pitch_encoder_kernel),
            ("classifier_hidden", self.classifier_hidden),
            ("max_steps_per_symbol", self.max_steps_per_symbol),
            ("f0_embedding_dim", self.f0_embedding_dim),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        for (name, k) in [
            ("encoder_kernel", self.encoder_kernel),
            ("location_kernel", self.location_kernel),
            ("postnet_kernel", self.postnet_kernel),
            ("pitch_encoder_kernel", self.pitch_encoder_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be odd, got {k}")));
            }
        }
        if self.encoder_dim == 0 || self.encoder_dim % 2 != 0 {
            return Err(Error::InvalidConfig("encoder_dim must be even and positive".into()));
        }
        if self.prosody_dim % self.token_heads != 0 {
            return Err(Error::InvalidConfig("prosody_dim must be divisible by token_heads".into()));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::InvalidConfig("prenet_dropout must be in [0, 1)".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.f0_reference_hz > 0.0) {
            return Err(Error::InvalidConfig("f0_reference_hz must be positive".into()));
        }
        if !(self.mel_std > 0.0 && self.mel_mean.is_finite()) {
            return Err(Error::InvalidConfig("mel_std must be positive and mel_mean finite".into()));
        }
        if !(self.gate_threshold > 0.0 && self.gate_threshold < 1.0) {
            return Err(Error::InvalidConfig("gate_threshold must be in (0, 1)".into()));
        }
        Ok(())
    }
}
