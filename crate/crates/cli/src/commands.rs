use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;

use prosody_core::audio::load_waveform;
use prosody_core::corpus::{
    generate_synthetic_corpus, load_manifest, load_speaker_stats, open_features, prepare_features, save_manifest,
    Manifest, UtteranceRecord, SPEAKER_STATS_FILE,
};
use prosody_core::metrics::{average_reports, evaluate_pair, save_batch_report, UtteranceMetrics};
use prosody_core::model::{load_checkpoint, Variant};
use prosody_core::pipeline::{emit_pitch_figure, write_bundle, PitchTransform, Synthesizer, TransferRequest};
use prosody_core::pitch::{extract_f0, PitchContour};
use prosody_core::train::{lambda_sweep, SweepEvalItem, TrainingSet};
use prosody_core::Error as CoreError;

use crate::config::{create_run_dir, echo_config, load_config, RunConfig};
use crate::{Common, UsageError};

/// Layout of a `prepare` output directory.
pub const DATA_MANIFEST: &str = "manifest.txt";
pub const HELD_OUT_MANIFEST: &str = "held_out.txt";
pub const FEATURE_DIR: &str = "features";

type Flags = Vec<(&'static str, toml::Value)>;

fn float(v: f64) -> toml::Value {
    toml::Value::Float(v)
}

fn int(v: usize) -> Result<toml::Value> {
    Ok(toml::Value::Integer(i64::try_from(v).map_err(|_| UsageError(format!("{v} is too large")))?))
}

fn push_opt<T>(flags: &mut Flags, key: &'static str, v: Option<T>, f: impl Fn(T) -> Result<toml::Value>) -> Result<()> {
    if let Some(v) = v {
        flags.push((key, f(v)?));
    }
    Ok(())
}

/// Resolves the configuration, creates the run directory and echoes the configuration into it.
fn setup(cmd: &str, common: &Common, mut flags: Flags) -> Result<(RunConfig, PathBuf)> {
    push_opt(&mut flags, "seed", common.seed, |s| int(s as usize))?;
    let cfg = load_config(common.config.as_deref(), &common.sets, flags)?;
    let dir = create_run_dir(cmd, common.out.as_deref(), &cfg.runs_dir, common.force)?;
    echo_config(&cfg, &dir)?;
    tracing::info!(dir = %dir.display(), "run directory");
    Ok((cfg, dir))
}

fn require_file(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!(CoreError::MissingFile(path.to_path_buf()));
    }
    Ok(())
}

fn absolute_records(m: &Manifest, records: &[UtteranceRecord]) -> Result<Vec<UtteranceRecord>> {
    records
        .iter()
        .map(|r| {
            let p = std::path::absolute(r.resolved_path(&m.base_dir))?;
            Ok(UtteranceRecord { audio_path: p, ..r.clone() })
        })
        .collect()
}

fn open_data(data: &Path, cfg: &RunConfig) -> Result<(TrainingSet, PathBuf)> {
    let manifest = load_manifest(data.join(DATA_MANIFEST))?;
    let features = data.join(FEATURE_DIR);
    let prepared = open_features(&manifest.records, &features)?;
    let set = TrainingSet::from_prepared(&prepared, &cfg.stft, None, None)?;
    Ok((set, prepared.stats_path))
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Manifest of `path|phonemes|speaker[|style]` lines.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    manifest: Option<PathBuf>,
    /// Synthetic corpus description (TOML); the corpus is generated into the run directory first.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Stop at the first unreadable utterance instead of skipping it.
    #[arg(long)]
    fail_fast: bool,
    #[command(flatten)]
    pub common: Common,
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let mut flags = Flags::new();
    if let Some(m) = &a.manifest {
        require_file(m)?;
    }
    if let Some(p) = &a.synthetic {
        require_file(p)?;
        let text = std::fs::read_to_string(p)?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| UsageError(format!("{}: {}", p.display(), e.message())))?;
        flags.push(("synthetic", toml::Value::Table(table)));
    }
    let (cfg, dir) = setup("prepare", &a.common, flags)?;
    let (manifest, held_out) = match &a.manifest {
        Some(path) => (load_manifest(path)?, None),
        None => {
            let generated = generate_synthetic_corpus(&cfg.synthetic, dir.join("corpus"))?;
            let held = generated.held_out_manifest.as_ref().map(load_manifest).transpose()?;
            (load_manifest(&generated.manifest)?, held)
        }
    };
    for (line, path) in &manifest.missing_audio {
        tracing::warn!(line, path = %path.display(), "audio file not found");
    }
    let mut features = cfg.features();
    features.fail_fast = a.fail_fast;
    let prepared = prepare_features(&manifest.records, &manifest.base_dir, &features, dir.join(FEATURE_DIR))?;
    if prepared.items.is_empty() {
        bail!(CoreError::EmptyInput("prepared utterances (every record failed)"));
    }
    let kept: Vec<UtteranceRecord> = prepared.items.iter().map(|i| i.record.clone()).collect();
    save_manifest(&absolute_records(&manifest, &kept)?, dir.join(DATA_MANIFEST))?;
    if let Some(h) = &held_out {
        save_manifest(&absolute_records(h, &h.records)?, dir.join(HELD_OUT_MANIFEST))?;
    }
    if !prepared.failures.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
        w.write_record(["utt_id", "reason"])?;
        for (id, reason) in &prepared.failures {
            w.write_record([id, reason])?;
        }
        w.flush()?;
    }
    println!(
        "prepared {} utterances ({} cached, {} skipped) in {}",
        prepared.items.len(),
        prepared.n_cache_hits(),
        prepared.failures.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Output directory of `prepare`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    /// Weight of the adversarial speaker loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Steps between learning-rate halvings.
    #[arg(long)]
    decay_steps: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write a checkpoint every N steps (the last step is always saved).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

pub fn train(a: TrainArgs) -> Result<()> {
    require_file(&a.data.join(DATA_MANIFEST))?;
    let mut flags = Flags::new();
    push_opt(&mut flags, "model.variant", a.variant, |v| Ok(toml::Value::String(v.name().into())))?;
    push_opt(&mut flags, "train.lambda", a.lambda, |v| Ok(float(v)))?;
    push_opt(&mut flags, "train.initial_lr", a.lr, |v| Ok(float(v)))?;
    push_opt(&mut flags, "train.decay_interval", a.decay_steps, int)?;
    push_opt(&mut flags, "train.max_steps", a.steps, int)?;
    push_opt(&mut flags, "train.batch_size", a.batch_size, int)?;
    push_opt(&mut flags, "train.checkpoint_interval", a.checkpoint_every, int)?;
    let (cfg, dir) = setup("train", &a.common, flags)?;
    let (data, stats) = open_data(&a.data, &cfg)?;
    tracing::info!(utterances = data.len(), speakers = data.speakers.len(), variant = cfg.model.variant.name(), "training");
    let outcome = prosody_core::train::train(&cfg.model, &cfg.train, &data, Some(&dir))?;
    std::fs::copy(&stats, dir.join(SPEAKER_STATS_FILE))?;
    let last = outcome.log.last().ok_or_else(|| anyhow!("no training steps were run"))?;
    println!(
        "trained {} steps: total {:.4} rmse {:.4} bce {:.4} ce {:.4}; checkpoint {}",
        last.step,
        last.total,
        last.rmse,
        last.bce,
        last.ce,
        outcome.checkpoints.last().map(|p| p.display().to_string()).unwrap_or_default()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference recording whose prosody is transferred.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Whitespace-separated phonemes.
    #[arg(long)]
    text: String,
    /// Target speaker name (or table index).
    #[arg(long)]
    speaker: String,
    /// Multiply the reference F0 by this factor.
    #[arg(long, conflicts_with_all = ["fit_range", "f0"])]
    pitch_scale: Option<f64>,
    /// Map the reference F0 onto the target speaker's vocal range.
    #[arg(long, conflicts_with = "f0")]
    fit_range: bool,
    /// With --fit-range, also match the log-F0 spread.
    #[arg(long, requires = "fit_range")]
    match_std: bool,
    /// Speaker statistics (default: `speaker_stats.csv` next to the checkpoint).
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Replace the reference F0 with this contour CSV.
    #[arg(long)]
    f0: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

pub fn transfer(a: TransferArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint, &candle_device())?;
    let variant = ckpt.model.variant();
    let Some(reference) = &a.reference else {
        bail!(UsageError(format!("the {} variant needs a reference recording: pass --ref <wav>", variant.name())));
    };
    require_file(reference)?;
    let text = ckpt.meta.vocabulary.encode(&a.text)?;
    let speaker = match ckpt.meta.speaker_index(&a.speaker) {
        Ok(i) => i,
        Err(e) => match a.speaker.parse::<usize>() {
            Ok(i) if i < ckpt.meta.speakers.len() => i as u32,
            _ => return Err(e.into()),
        },
    };
    let speaker_name = ckpt.meta.speakers[speaker as usize].clone();
    let (cfg, dir) = setup("transfer", &a.common, Flags::new())?;

    let audio = load_waveform(reference, cfg.stft.sample_rate)?;
    let mut synth = Synthesizer::new(ckpt.model, ckpt.meta);
    synth.stft = cfg.stft.clone();
    synth.f0 = cfg.f0();
    synth.vocoder_iterations = cfg.vocoder.iterations;
    synth.vocoder_seed = cfg.vocoder.seed;
    let pitch_transform = if let Some(factor) = a.pitch_scale {
        Some(PitchTransform::Scale { factor })
    } else if a.fit_range {
        let stats = a.stats.clone().unwrap_or_else(|| a.checkpoint.with_file_name(SPEAKER_STATS_FILE));
        synth.speaker_stats = load_speaker_stats(&stats)?;
        Some(synth.vocal_range_transform(&speaker_name, a.match_std)?)
    } else if let Some(path) = &a.f0 {
        Some(PitchTransform::Replace { contour: PitchContour::load_csv(path, cfg.stft.hop_length, cfg.stft.sample_rate)? })
    } else {
        None
    };
    let request = TransferRequest { text, reference_audio: audio, speaker, pitch_transform };
    let result = synth.transfer(&request)?;
    write_bundle(&result, &dir)?;
    println!(
        "{} transfer: {} frames, output median F0 {}, bundle in {}",
        variant.name(),
        result.mel.n_frames,
        result.output_f0.median_voiced().map_or("-".to_string(), |f| format!("{f:.1} Hz")),
        dir.display()
    );
    Ok(())
}

fn candle_device() -> prosody_core::model::Device {
    prosody_core::model::Device::Cpu
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of reference recordings (`<utt_id>.wav`).
    #[arg(long)]
    ref_dir: PathBuf,
    /// Directory of estimates with the same file names.
    #[arg(long)]
    est_dir: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

fn wav_index(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        bail!(CoreError::MissingFile(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            if let Some(stem) = path.file_stem() {
                out.insert(stem.to_string_lossy().into_owned(), path);
            }
        }
    }
    Ok(out)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let refs = wav_index(&a.ref_dir)?;
    let ests = wav_index(&a.est_dir)?;
    let missing_est: Vec<&str> = refs.keys().filter(|k| !ests.contains_key(*k)).map(String::as_str).collect();
    let missing_ref: Vec<&str> = ests.keys().filter(|k| !refs.contains_key(*k)).map(String::as_str).collect();
    if !missing_est.is_empty() || !missing_ref.is_empty() {
        bail!(
            "utterance sets differ; missing from {}: [{}]; missing from {}: [{}]",
            a.est_dir.display(),
            missing_est.join(", "),
            a.ref_dir.display(),
            missing_ref.join(", ")
        );
    }
    if refs.is_empty() {
        bail!(CoreError::EmptyInput("no .wav files to evaluate"));
    }
    let (cfg, dir) = setup("eval", &a.common, Flags::new())?;
    let eval_cfg = cfg.eval_config();
    let mut rows = Vec::with_capacity(refs.len());
    for (id, ref_path) in &refs {
        let reference = load_waveform(ref_path, cfg.stft.sample_rate)?;
        let estimate = load_waveform(&ests[id], cfg.stft.sample_rate)?;
        let report = evaluate_pair(&reference, &estimate, &eval_cfg).with_context(|| format!("evaluating {id}"))?;
        rows.push(UtteranceMetrics { utt_id: id.clone(), report });
    }
    save_batch_report(&rows, dir.join("metrics.csv"))?;
    let mean = average_reports(&rows.iter().map(|r| r.report).collect::<Vec<_>>())?;
    println!(
        "{} utterances: gpe {:.4} vde {:.4} ffe {:.4} mcd {:.3} dB; report {}",
        rows.len(),
        mean.gpe,
        mean.vde,
        mean.ffe,
        mean.mcd_db,
        dir.join("metrics.csv").display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Output directory of `prepare`.
    #[arg(long)]
    data: PathBuf,
    /// Adversarial weights to train with.
    #[arg(long, value_delimiter = ',', default_value = "0.0,0.02,0.2,2.0")]
    lambdas: Vec<f64>,
    /// Seeds per weight; rows report the means.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    steps: Option<usize>,
    /// Utterances to resynthesize for the metrics (default: the held-out manifest of `--data`
    /// when present, else the training manifest).
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    require_file(&a.data.join(DATA_MANIFEST))?;
    let mut flags = Flags::new();
    flags.push(("sweep.lambdas", toml::Value::Array(a.lambdas.iter().map(|&l| float(l)).collect())));
    if let Some(seeds) = &a.seeds {
        let seeds = seeds.iter().map(|&s| int(s as usize)).collect::<Result<Vec<_>>>()?;
        flags.push(("sweep.seeds", toml::Value::Array(seeds)));
    }
    push_opt(&mut flags, "model.variant", a.variant, |v| Ok(toml::Value::String(v.name().into())))?;
    push_opt(&mut flags, "train.max_steps", a.steps, int)?;
    let eval_path = match &a.eval_manifest {
        Some(p) => p.clone(),
        None if a.data.join(HELD_OUT_MANIFEST).exists() => a.data.join(HELD_OUT_MANIFEST),
        None => a.data.join(DATA_MANIFEST),
    };
    require_file(&eval_path)?;
    let (cfg, dir) = setup("sweep", &a.common, flags)?;
    let (data, _) = open_data(&a.data, &cfg)?;
    let eval_manifest = load_manifest(&eval_path)?;
    let mut eval_set = Vec::with_capacity(eval_manifest.records.len());
    for r in &eval_manifest.records {
        let speaker = data
            .speakers
            .iter()
            .position(|s| *s == r.speaker_id)
            .ok_or_else(|| CoreError::UnknownSpeaker(r.speaker_id.clone()))?;
        eval_set.push(SweepEvalItem {
            utt_id: r.utt_id(),
            text: data.vocabulary.encode(&r.phoneme_string())?,
            speaker: speaker as u32,
            audio: load_waveform(r.resolved_path(&eval_manifest.base_dir), cfg.stft.sample_rate)?,
        });
    }
    let report = dir.join("sweep.csv");
    let rows = lambda_sweep(&cfg.model, &cfg.train, &cfg.sweep, &data, &eval_set, &cfg.eval_config(), Some(&report))?;
    for r in &rows {
        println!(
            "lambda {:<6} gpe {:.4} vde {:.4} ffe {:.4} mcd {:.3} dB probe {:.3}",
            r.lambda, r.gpe, r.vde, r.ffe, r.mcd_db, r.probe_accuracy
        );
    }
    println!("report {}", report.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// `NAME=PATH` where PATH is a recording (.wav) or a contour CSV. Repeatable.
    #[arg(long = "series", value_name = "NAME=PATH", required = true)]
    series: Vec<String>,
    /// File stem of the figure inside the run directory.
    #[arg(long, default_value = "pitch")]
    name: String,
    #[command(flatten)]
    pub common: Common,
}

pub fn plot(a: PlotArgs) -> Result<()> {
    let mut specs = Vec::with_capacity(a.series.len());
    for s in &a.series {
        let Some((name, path)) = s.split_once('=') else {
            bail!(UsageError(format!("--series expects NAME=PATH, got `{s}`")));
        };
        let path = PathBuf::from(path);
        require_file(&path)?;
        specs.push((name.to_string(), path));
    }
    let (cfg, dir) = setup("plot", &a.common, Flags::new())?;
    let f0_cfg = cfg.f0();
    let mut series = Vec::with_capacity(specs.len());
    for (name, path) in specs {
        let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        let contour = if is_wav {
            extract_f0(&load_waveform(&path, cfg.stft.sample_rate)?, &f0_cfg)?
        } else {
            PitchContour::load_csv(&path, cfg.stft.hop_length, cfg.stft.sample_rate)?
        };
        series.push((name, contour));
    }
    let files = emit_pitch_figure(&series, dir.join(&a.name))?;
    println!("figure {} (data {})", files.svg.display(), files.csv.display());
    Ok(())
}
