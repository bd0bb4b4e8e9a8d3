#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::Path;

use prosody_core::audio::{load_waveform, Waveform, SAMPLE_RATE};
use prosody_core::corpus::{generate_synthetic_corpus, load_manifest, prepare_features, FeatureConfig, PreparedCorpus, SyntheticCorpusSpec};
use prosody_core::model::PhonemeSequence;
use prosody_core::pitch::PitchContour;
use prosody_core::spectral::MelSpectrogram;
use prosody_core::train::TrainingSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tone(freq: f64, secs: f64, amp: f32) -> Waveform {
    let n = (secs * SAMPLE_RATE as f64) as usize;
    let samples = (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32).collect();
    Waveform::new(samples, SAMPLE_RATE).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random contour with roughly 60% voiced frames.
pub fn random_contour(rng: &mut ChaCha8Rng, len: usize) -> PitchContour {
    let values: Vec<f64> = (0..len).map(|_| if rng.random_bool(0.6) { rng.random_range(60.0..400.0) } else { 0.0 }).collect();
    PitchContour::from_hz(&values, 256, SAMPLE_RATE)
}

/// An estimate near `reference`: some frames flip voicing, some drift by up to ±40%.
pub fn perturbed(rng: &mut ChaCha8Rng, reference: &PitchContour) -> PitchContour {
    let values: Vec<f64> = reference
        .f0
        .iter()
        .map(|&f| {
            if rng.random_bool(0.15) {
                if f > 0.0 { 0.0 } else { rng.random_range(60.0..400.0) }
            } else if f > 0.0 {
                f * rng.random_range(0.6..1.4)
            } else {
                0.0
            }
        })
        .collect();
    PitchContour::from_hz(&values, 256, SAMPLE_RATE)
}

pub fn random_mel(rng: &mut ChaCha8Rng, frames: usize, channels: usize) -> MelSpectrogram {
    let data = (0..frames * channels).map(|_| rng.random_range(-6.0f32..1.0)).collect();
    MelSpectrogram::new(data, frames, channels, 256, SAMPLE_RATE).unwrap()
}

pub fn random_text(rng: &mut ChaCha8Rng, len: usize, n_symbols: usize) -> PhonemeSequence {
    let ids = (0..len).map(|_| rng.random_range(2..n_symbols as u32)).collect();
    PhonemeSequence::new(ids, n_symbols).unwrap()
}

pub struct ToyCorpus {
    pub prepared: PreparedCorpus,
    pub data: TrainingSet,
    pub base_dir: std::path::PathBuf,
}

impl ToyCorpus {
    pub fn audio(&self, utt_id: &str) -> Waveform {
        let item = self.prepared.items.iter().find(|i| i.utt_id == utt_id).expect("utterance present");
        load_waveform(item.record.resolved_path(&self.base_dir), SAMPLE_RATE).unwrap()
    }

    pub fn index(&self, utt_id: &str) -> usize {
        self.data.items.iter().position(|i| i.utt_id == utt_id).expect("utterance present")
    }
}

/// Generates and prepares a synthetic corpus under `dir`.
pub fn toy_corpus(dir: &Path, spec: &SyntheticCorpusSpec) -> ToyCorpus {
    let generated = generate_synthetic_corpus(spec, dir.join("corpus")).unwrap();
    let manifest = load_manifest(&generated.manifest).unwrap();
    let fc = FeatureConfig::default();
    let prepared = prepare_features(&manifest.records, &manifest.base_dir, &fc, dir.join("features")).unwrap();
    let data = TrainingSet::from_prepared(&prepared, &fc.stft, None, None).unwrap();
    ToyCorpus { prepared, data, base_dir: manifest.base_dir }
}

/// Independent error counts: voicing errors, both-voiced frames and gross errors, each
/// from its own filtered pass.
pub struct BruteCounts {
    pub n: usize,
    pub voicing: usize,
    pub both: usize,
    pub gross: usize,
}

pub fn brute_counts(reference: &PitchContour, estimate: &PitchContour, threshold: f64) -> BruteCounts {
    let n = reference.f0.len();
    let voicing = (0..n).filter(|&t| (reference.f0[t] > 0.0) != (estimate.f0[t] > 0.0)).count();
    let both: Vec<usize> = (0..n).filter(|&t| reference.f0[t] > 0.0 && estimate.f0[t] > 0.0).collect();
    let gross = both.iter().filter(|&&t| (estimate.f0[t] / reference.f0[t] - 1.0).abs() > threshold).count();
    BruteCounts { n, voicing, both: both.len(), gross }
}

impl BruteCounts {
    pub fn vde(&self) -> f64 {
        if self.n == 0 { 0.0 } else { self.voicing as f64 / self.n as f64 }
    }

    pub fn gpe(&self) -> f64 {
        if self.both == 0 { 0.0 } else { self.gross as f64 / self.both as f64 }
    }

    pub fn ffe(&self) -> f64 {
        if self.n == 0 { 0.0 } else { (self.voicing + self.gross) as f64 / self.n as f64 }
    }
}

fn frame_db(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    10.0 / std::f64::consts::LN_10 * (2.0 * d).sqrt()
}

/// Memoized recursion over the full cost matrix. Returns the minimal accumulated
/// Euclidean cost and the mean dB distortion along the path achieving it.
pub fn brute_dtw_mcd(reference: &[Vec<f64>], estimate: &[Vec<f64>]) -> (f64, f64) {
    let (n, m) = (reference.len(), estimate.len());
    let cost: Vec<Vec<f64>> = reference
        .iter()
        .map(|r| estimate.iter().map(|e| r.iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()).collect())
        .collect();
    // best[i][j] = (cost, path) of the cheapest path from (0,0) to (i,j).
    let mut memo: Vec<Vec<Option<(f64, Vec<(usize, usize)>)>>> = vec![vec![None; m]; n];
    fn solve(
        i: usize,
        j: usize,
        cost: &[Vec<f64>],
        memo: &mut Vec<Vec<Option<(f64, Vec<(usize, usize)>)>>>,
    ) -> (f64, Vec<(usize, usize)>) {
        if let Some(v) = &memo[i][j] {
            return v.clone();
        }
        let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
        let mut preds = Vec::new();
        if i > 0 && j > 0 {
            preds.push((i - 1, j - 1));
        }
        if i > 0 {
            preds.push((i - 1, j));
        }
        if j > 0 {
            preds.push((i, j - 1));
        }
        for (pi, pj) in preds {
            let (c, p) = solve(pi, pj, cost, memo);
            if best.as_ref().is_none_or(|b| c < b.0) {
                best = Some((c, p));
            }
        }
        let (c, mut p) = best.unwrap_or((0.0, Vec::new()));
        p.push((i, j));
        let out = (c + cost[i][j], p);
        memo[i][j] = Some(out.clone());
        out
    }
    let (total, path) = solve(n - 1, m - 1, &cost, &mut memo);
    let mcd = path.iter().map(|&(i, j)| frame_db(&reference[i], &estimate[j])).sum::<f64>() / path.len() as f64;
    (total, mcd)
}

pub fn random_frames(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..len).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

pub fn quick_train(data: &TrainingSet, variant: prosody_core::model::Variant, steps: usize) -> prosody_core::train::TrainOutcome {
    let mc = prosody_core::model::ModelConfig { variant, ..Default::default() };
    let tc = prosody_core::train::TrainConfig { max_steps: steps, ..Default::default() };
    prosody_core::train::train(&mc, &tc, data, None).unwrap()
}

/// Reads a written bundle back and checks its files agree with each other.
pub fn check_bundle(dir: &Path) -> Result<(), String> {
    use prosody_core::pipeline::{load_transform_record, BUNDLE_FILES};
    for f in BUNDLE_FILES {
        if !dir.join(f).is_file() {
            return Err(format!("missing {f}"));
        }
    }
    let wave = load_waveform(dir.join("out.wav"), SAMPLE_RATE).map_err(|e| e.to_string())?;
    let mel = MelSpectrogram::load(dir.join("mel.bin"), 256, SAMPLE_RATE).map_err(|e| e.to_string())?;
    let f0 = PitchContour::load_csv(dir.join("f0.csv"), 256, SAMPLE_RATE).map_err(|e| e.to_string())?;
    load_transform_record(dir.join("transform.json")).map_err(|e| e.to_string())?;
    if wave.is_empty() || mel.n_frames == 0 {
        return Err("empty output".into());
    }
    if f0.len() != mel.n_frames {
        return Err(format!("f0 has {} frames, mel {}", f0.len(), mel.n_frames));
    }
    let attention = std::fs::read_to_string(dir.join("attention.csv")).map_err(|e| e.to_string())?;
    if !attention.starts_with("matrix,frame,position,weight") || attention.lines().count() < 2 {
        return Err("attention table is empty".into());
    }
    Ok(())
}
