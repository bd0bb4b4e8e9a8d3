use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::UtteranceRecord;
use crate::audio::load_waveform;
use crate::error::{Error, Result};
use crate::pitch::{extract_f0, F0Config, PitchContour, VocalRangeStats};
use crate::spectral::{mel_spectrogram, MelSpectrogram, StftConfig};

pub const SPEAKER_STATS_FILE: &str = "speaker_stats.csv";
const STATS_HEADER: [&str; 4] = ["speaker_id", "log_f0_mean", "log_f0_std", "n_voiced_frames"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub stft: StftConfig,
    pub f0: F0Config,
    /// Abort on the first unreadable utterance instead of skipping and reporting it.
    pub fail_fast: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        let stft = StftConfig::default();
        Self { f0: F0Config::aligned_with(&stft), stft, fail_fast: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedUtterance {
    pub utt_id: String,
    pub record: UtteranceRecord,
    pub mel_path: PathBuf,
    pub f0_path: PathBuf,
    pub n_frames: usize,
    /// True when the cached files matched the audio and configuration and were reused.
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCorpus {
    pub items: Vec<PreparedUtterance>,
    /// `(utt_id, reason)` for skipped utterances.
    pub failures: Vec<(String, String)>,
    pub speaker_stats: BTreeMap<String, VocalRangeStats>,
    pub stats_path: PathBuf,
}

impl PreparedCorpus {
    pub fn n_cache_hits(&self) -> usize {
        self.items.iter().filter(|i| i.cache_hit).count()
    }
}

fn cache_key(audio: &[u8], cfg: &FeatureConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(audio);
    h.update(serde_json::to_vec(&(&cfg.stft, &cfg.f0))?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn prepare_one(record: &UtteranceRecord, base_dir: &Path, cfg: &FeatureConfig, out_dir: &Path) -> Result<(PreparedUtterance, PitchContour)> {
    let utt_id = record.utt_id();
    let audio_path = record.resolved_path(base_dir);
    if !audio_path.exists() {
        return Err(Error::MissingFile(audio_path));
    }
    let bytes = std::fs::read(&audio_path)?;
    let key = cache_key(&bytes, cfg)?;
    let mel_path = out_dir.join(format!("{utt_id}.mel"));
    let f0_path = out_dir.join(format!("{utt_id}.f0.csv"));
    let key_path = out_dir.join(format!("{utt_id}.key"));
    let hop = cfg.stft.hop_length;
    let sr = cfg.stft.sample_rate;
    if mel_path.exists() && f0_path.exists() && std::fs::read_to_string(&key_path).ok().as_deref() == Some(key.as_str()) {
        let contour = PitchContour::load_csv(&f0_path, hop, sr)?;
        let n_frames = read_mel_frames(&mel_path)?;
        if n_frames == contour.len() {
            let item = PreparedUtterance { utt_id, record: record.clone(), mel_path, f0_path, n_frames, cache_hit: true };
            return Ok((item, contour));
        }
    }
    let wave = load_waveform(&audio_path, sr)?;
    let mel = mel_spectrogram(&wave, &cfg.stft)?;
    let contour = extract_f0(&wave, &cfg.f0)?;
    if contour.len() != mel.n_frames {
        return Err(Error::LengthMismatch { left: contour.len(), right: mel.n_frames });
    }
    mel.save(&mel_path)?;
    contour.save_csv(&f0_path)?;
    std::fs::write(&key_path, &key)?;
    let item = PreparedUtterance { utt_id, record: record.clone(), mel_path, f0_path, n_frames: mel.n_frames, cache_hit: false };
    Ok((item, contour))
}

fn read_mel_frames(path: &Path) -> Result<usize> {
    use std::io::Read;
    let mut header = [0u8; 4];
    std::fs::File::open(path)?.read_exact(&mut header)?;
    Ok(u32::from_le_bytes(header) as usize)
}

/// Computes (or reuses) mel and F0 features for every record and writes per-speaker
/// log-F0 statistics to `speaker_stats.csv`. Work items run in parallel; each writes only
/// its own files, and the statistics file is written once at the end.
pub fn prepare_features(
    records: &[UtteranceRecord],
    base_dir: &Path,
    cfg: &FeatureConfig,
    out_dir: impl AsRef<Path>,
) -> Result<PreparedCorpus> {
    cfg.stft.validate()?;
    cfg.f0.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let results: Vec<Result<(PreparedUtterance, PitchContour)>> =
        records.par_iter().map(|r| prepare_one(r, base_dir, cfg, out_dir)).collect();
    let mut items = Vec::new();
    let mut failures = Vec::new();
    let mut contours: BTreeMap<String, Vec<PitchContour>> = BTreeMap::new();
    for r in records {
        contours.entry(r.speaker_id.clone()).or_default();
    }
    for (record, result) in records.iter().zip(results) {
        match result {
            Ok((item, contour)) => {
                contours.entry(record.speaker_id.clone()).or_default().push(contour);
                items.push(item);
            }
            Err(e) if cfg.fail_fast => return Err(e),
            Err(e) => {
                tracing::warn!(utt = %record.utt_id(), error = %e, "skipping utterance");
                failures.push((record.utt_id(), e.to_string()));
            }
        }
    }
    let speaker_stats: BTreeMap<String, VocalRangeStats> =
        contours.iter().map(|(spk, cs)| (spk.clone(), VocalRangeStats::from_contours(cs))).collect();
    let stats_path = out_dir.join(SPEAKER_STATS_FILE);
    save_speaker_stats(&speaker_stats, &stats_path)?;
    Ok(PreparedCorpus { items, failures, speaker_stats, stats_path })
}

/// Opens features written earlier by [`prepare_features`] without recomputing or writing
/// anything. Every record must have its mel and F0 files in `dir`.
pub fn open_features(records: &[UtteranceRecord], dir: impl AsRef<Path>) -> Result<PreparedCorpus> {
    let dir = dir.as_ref();
    let stats_path = dir.join(SPEAKER_STATS_FILE);
    let speaker_stats = load_speaker_stats(&stats_path)?;
    let mut items = Vec::with_capacity(records.len());
    for record in records {
        let utt_id = record.utt_id();
        let mel_path = dir.join(format!("{utt_id}.mel"));
        let f0_path = dir.join(format!("{utt_id}.f0.csv"));
        for p in [&mel_path, &f0_path] {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        let n_frames = read_mel_frames(&mel_path)?;
        items.push(PreparedUtterance { utt_id, record: record.clone(), mel_path, f0_path, n_frames, cache_hit: true });
    }
    Ok(PreparedCorpus { items, failures: Vec::new(), speaker_stats, stats_path })
}

/// Loads the cached features of one prepared utterance.
pub fn load_features(item: &PreparedUtterance, stft: &StftConfig) -> Result<(MelSpectrogram, PitchContour)> {
    let mel = MelSpectrogram::load(&item.mel_path, stft.hop_length, stft.sample_rate)?;
    let f0 = PitchContour::load_csv(&item.f0_path, stft.hop_length, stft.sample_rate)?;
    if mel.n_frames != f0.len() {
        return Err(Error::LengthMismatch { left: f0.len(), right: mel.n_frames });
    }
    Ok((mel, f0))
}

pub fn save_speaker_stats(stats: &BTreeMap<String, VocalRangeStats>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(STATS_HEADER)?;
    for (spk, s) in stats {
        w.write_record([spk.clone(), s.log_f0_mean.to_string(), s.log_f0_std.to_string(), s.n_voiced_frames.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_speaker_stats(path: impl AsRef<Path>) -> Result<BTreeMap<String, VocalRangeStats>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bad = |reason: String| Error::Parse { path: path.to_path_buf(), reason };
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != STATS_HEADER {
        return Err(bad(format!("expected header {}", STATS_HEADER.join(","))));
    }
    let mut out = BTreeMap::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let num = |j: usize| -> Result<f64> {
            row.get(j).and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("row {}: bad field {j}", i + 2)))
        };
        let n = row.get(3).and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("row {}: bad n_voiced_frames", i + 2)))?;
        out.insert(
            row.get(0).unwrap_or_default().to_string(),
            VocalRangeStats { log_f0_mean: num(1)?, log_f0_std: num(2)?, n_voiced_frames: n },
        );
    }
    Ok(out)
}
