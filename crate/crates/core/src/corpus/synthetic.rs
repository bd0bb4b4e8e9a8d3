//! Deterministic harmonic-tone corpus: each symbol has its own spectral envelope and
//! duration, each speaker its own F0 range, each style tag its own contour shape.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{save_manifest, UtteranceRecord};
use crate::audio::{write_waveform, WavEncoding, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// F0 trajectory shape over an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContourFamily {
    Flat,
    Rising,
    Falling,
    PeakMid,
}

impl ContourFamily {
    pub const ALL: [ContourFamily; 4] = [ContourFamily::Flat, ContourFamily::Rising, ContourFamily::Falling, ContourFamily::PeakMid];

    pub fn name(self) -> &'static str {
        match self {
            ContourFamily::Flat => "flat",
            ContourFamily::Rising => "rising",
            ContourFamily::Falling => "falling",
            ContourFamily::PeakMid => "peak_mid",
        }
    }

    /// Position in `[0, 1]` of the speaker's range at normalized time `tau ∈ [0, 1]`.
    pub fn shape(self, tau: f64) -> f64 {
        match self {
            ContourFamily::Flat => 0.5,
            ContourFamily::Rising => tau,
            ContourFamily::Falling => 1.0 - tau,
            ContourFamily::PeakMid => (PI * tau).sin(),
        }
    }
}

impl std::str::FromStr for ContourFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ContourFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown contour family `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpeaker {
    pub id: String,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub speakers: Vec<SyntheticSpeaker>,
    /// Style tags cycled over each speaker's utterances, offset by the speaker index.
    pub families: Vec<ContourFamily>,
    pub utterances_per_speaker: usize,
    pub n_symbols: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    /// Leading and trailing silence.
    pub edge_silence_ms: f64,
    /// Utterances of this family go to the held-out manifest instead of the training one.
    pub held_out_family: Option<ContourFamily>,
    /// Extra renderings of every utterance, same text and speaker, with the F0 range
    /// multiplied by a factor from `pitch_scale_range`. The range is cut into
    /// `pitch_variants` equal strata and each variant draws uniformly from its own.
    pub pitch_variants: usize,
    pub pitch_scale_range: [f64; 2],
    pub seed: u64,
}

/// Minimum gap between neighbouring speakers' F0 ranges, relative to the lower range's top.
pub const MIN_RANGE_SEPARATION: f64 = 0.05;

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        let speaker = |i: usize, lo: f64, hi: f64| SyntheticSpeaker { id: format!("spk{i}"), f0_min_hz: lo, f0_max_hz: hi };
        Self {
            speakers: vec![speaker(0, 100.0, 140.0), speaker(1, 150.0, 185.0), speaker(2, 200.0, 240.0), speaker(3, 255.0, 295.0)],
            families: ContourFamily::ALL.to_vec(),
            utterances_per_speaker: 4,
            n_symbols: 8,
            min_symbols: 5,
            max_symbols: 7,
            edge_silence_ms: 40.0,
            held_out_family: None,
            pitch_variants: 0,
            pitch_scale_range: [0.5, 1.25],
            seed: 7,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.speakers.is_empty() {
            return bad("at least one speaker is required".into());
        }
        if self.families.is_empty() {
            return bad("at least one contour family is required".into());
        }
        if self.n_symbols == 0 || self.min_symbols == 0 || self.min_symbols > self.max_symbols {
            return bad("symbol counts must satisfy 1 <= min_symbols <= max_symbols and n_symbols >= 1".into());
        }
        let [lo, hi] = self.pitch_scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("pitch_scale_range must satisfy 0 < low <= high".into());
        }
        if self.pitch_variants > 0 {
            for s in &self.speakers {
                if s.f0_min_hz * lo < 50.0 || s.f0_max_hz * hi > 600.0 {
                    return bad(format!("pitch variants of speaker {} leave the 50-600 Hz band", s.id));
                }
            }
        }
        if !(self.edge_silence_ms >= 0.0) {
            return bad("edge_silence_ms must be non-negative".into());
        }
        for s in &self.speakers {
            if !(s.f0_min_hz >= 60.0 && s.f0_min_hz < s.f0_max_hz && s.f0_max_hz <= 500.0) {
                return bad(format!("speaker {} needs 60 <= f0_min_hz < f0_max_hz <= 500", s.id));
            }
        }
        let mut ranges: Vec<_> = self.speakers.iter().collect();
        ranges.sort_by(|a, b| a.f0_min_hz.total_cmp(&b.f0_min_hz));
        for w in ranges.windows(2) {
            if w[1].f0_min_hz < w[0].f0_max_hz * (1.0 + MIN_RANGE_SEPARATION) {
                return bad(format!(
                    "F0 ranges of {} and {} are closer than {:.0}%",
                    w[0].id,
                    w[1].id,
                    MIN_RANGE_SEPARATION * 100.0
                ));
            }
        }
        let mut ids: Vec<_> = self.speakers.iter().map(|s| &s.id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.speakers.len() {
            return bad("speaker ids must be unique".into());
        }
        Ok(())
    }

    pub fn symbol_names(&self) -> Vec<String> {
        (0..self.n_symbols).map(symbol_name).collect()
    }
}

pub fn symbol_name(i: usize) -> String {
    format!("p{i}")
}

/// Segment length of symbol `i`.
pub fn symbol_duration_ms(i: usize) -> f64 {
    55.0 + 12.0 * (i % 4) as f64
}

/// Amplitude of a harmonic at `freq` for symbol `i`: a 1/k-like tilt plus one formant bump.
fn envelope(symbol: usize, freq: f64, harmonic: usize) -> f64 {
    let formant = 400.0 + 330.0 * symbol as f64;
    let bump = (-((freq - formant) / 250.0).powi(2)).exp();
    (0.5 + 1.5 * bump) / (harmonic as f64).powf(0.8)
}

/// Paths written by [`generate_synthetic_corpus`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedCorpus {
    pub manifest: PathBuf,
    pub held_out_manifest: Option<PathBuf>,
    pub records: Vec<UtteranceRecord>,
    pub held_out: Vec<UtteranceRecord>,
}

/// Synthesizes one utterance with `edge_silence_ms` of silence on both sides.
pub fn synthesize_utterance(symbols: &[usize], speaker: &SyntheticSpeaker, family: ContourFamily, edge_silence_ms: f64) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let edge = (edge_silence_ms / 1000.0 * sr).round() as usize;
    let seg: Vec<usize> = symbols.iter().map(|&s| (symbol_duration_ms(s) / 1000.0 * sr).round() as usize).collect();
    let voiced_len: usize = seg.iter().sum();
    let ramp = (0.01 * sr) as usize;
    let mut samples = vec![0f32; edge * 2 + voiced_len];
    let mut phase = 0.0f64;
    let mut sym_idx = 0;
    let mut seg_start = 0;
    for n in 0..voiced_len {
        while n >= seg_start + seg[sym_idx] {
            seg_start += seg[sym_idx];
            sym_idx += 1;
        }
        let tau = n as f64 / voiced_len.max(2) as f64;
        let f0 = speaker.f0_min_hz + (speaker.f0_max_hz - speaker.f0_min_hz) * family.shape(tau);
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
        // Crossfade the envelope into the next symbol over the last 10 ms of a segment.
        let into = n - seg_start;
        let next_w = if sym_idx + 1 < symbols.len() && into + ramp > seg[sym_idx] {
            (into + ramp - seg[sym_idx]) as f64 / (2 * ramp) as f64
        } else {
            0.0
        };
        let mut v = 0.0;
        let n_harm = ((4000.0 / f0) as usize).max(1);
        for k in 1..=n_harm {
            let freq = k as f64 * f0;
            let mut a = envelope(symbols[sym_idx], freq, k);
            if next_w > 0.0 {
                a = a * (1.0 - next_w) + envelope(symbols[sym_idx + 1], freq, k) * next_w;
            }
            v += a * (k as f64 * phase).sin();
        }
        // 10 ms fade at the utterance edges.
        let edge_gain = ((n.min(voiced_len - 1 - n)) as f64 / ramp as f64).min(1.0);
        samples[edge + n] = (0.12 * v * edge_gain) as f32;
    }
    let mut wave = Waveform { samples, sample_rate: SAMPLE_RATE };
    if wave.peak() > 0.9 {
        let g = 0.9 / wave.peak();
        wave.samples.iter_mut().for_each(|s| *s *= g);
    }
    wave
}

/// Writes `wavs/<speaker>_<nnn>.wav`, `manifest.txt` and, with a held-out family, `heldout.txt`.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, out_dir: impl AsRef<Path>) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wavs");
    std::fs::create_dir_all(&wav_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut variant_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut records = Vec::new();
    let mut held_out = Vec::new();
    for (si, speaker) in spec.speakers.iter().enumerate() {
        for u in 0..spec.utterances_per_speaker {
            let family = spec.families[(si + u) % spec.families.len()];
            let len = rng.random_range(spec.min_symbols..=spec.max_symbols);
            let symbols: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.n_symbols)).collect();
            let [lo, hi] = spec.pitch_scale_range;
            let width = (hi - lo) / spec.pitch_variants.max(1) as f64;
            let scales: Vec<f64> = std::iter::once(1.0)
                .chain((0..spec.pitch_variants).map(|k| lo + width * (k as f64 + variant_rng.random::<f64>())))
                .collect();
            for (v, &scale) in scales.iter().enumerate() {
                let voice = SyntheticSpeaker { f0_min_hz: speaker.f0_min_hz * scale, f0_max_hz: speaker.f0_max_hz * scale, ..speaker.clone() };
                let wave = synthesize_utterance(&symbols, &voice, family, spec.edge_silence_ms);
                let name = if v == 0 { format!("{}_{u:03}.wav", speaker.id) } else { format!("{}_{u:03}_v{v}.wav", speaker.id) };
                let rel = PathBuf::from("wavs").join(name);
                write_waveform(out_dir.join(&rel), &wave, WavEncoding::Pcm16)?;
                let record = UtteranceRecord {
                    audio_path: rel,
                    phonemes: symbols.iter().map(|&s| symbol_name(s)).collect(),
                    speaker_id: speaker.id.clone(),
                    style: Some(family.name().to_string()),
                };
                if Some(family) == spec.held_out_family {
                    held_out.push(record);
                } else {
                    records.push(record);
                }
            }
        }
    }
    let manifest = out_dir.join("manifest.txt");
    save_manifest(&records, &manifest)?;
    let held_out_manifest = if spec.held_out_family.is_some() {
        let p = out_dir.join("heldout.txt");
        save_manifest(&held_out, &p)?;
        Some(p)
    } else {
        None
    };
    Ok(GeneratedCorpus { manifest, held_out_manifest, records, held_out })
}
