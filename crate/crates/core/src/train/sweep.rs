use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{pooled_prosody_features, probe_accuracy, train, TrainConfig, TrainingSet};
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::metrics::{average_reports, evaluate_pair, EvalConfig, MetricReport};
use crate::model::{ModelConfig, PhonemeSequence};
use crate::pipeline::{Synthesizer, TransferRequest};

pub const SWEEP_HEADER: [&str; 7] = ["lambda", "gpe", "vde", "ffe", "mcd_db", "probe_accuracy", "status"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    /// Every λ is trained once per seed; rows hold the means.
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { lambdas: vec![0.0, 0.02, 0.2, 2.0], seeds: vec![0] }
    }
}

impl SweepConfig {
    /// Validated, ascending, deduplicated λ values.
    pub fn sorted_lambdas(&self) -> Result<Vec<f64>> {
        if self.lambdas.is_empty() {
            return Err(Error::EmptyInput("lambda values"));
        }
        if self.seeds.is_empty() {
            return Err(Error::EmptyInput("sweep seeds"));
        }
        if let Some(bad) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::InvalidConfig(format!("lambda must be finite and >= 0, got {bad}")));
        }
        let mut out = self.lambdas.clone();
        out.sort_by(|a, b| a.total_cmp(b));
        out.dedup();
        Ok(out)
    }
}

/// A held-out utterance, resynthesized from its own audio as the reference.
#[derive(Debug, Clone)]
pub struct SweepEvalItem {
    pub utt_id: String,
    pub text: PhonemeSequence,
    pub speaker: u32,
    pub audio: Waveform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepStatus {
    Complete,
    Incomplete,
}

impl SweepStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepStatus::Complete => "complete",
            SweepStatus::Incomplete => "incomplete",
        }
    }
}

/// Means over the finished seeds of one λ. Metric fields are NaN until a seed finishes.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub gpe: f64,
    pub vde: f64,
    pub ffe: f64,
    pub mcd_db: f64,
    pub probe_accuracy: f64,
    pub seeds_done: usize,
    pub status: SweepStatus,
}

impl SweepRow {
    fn pending(lambda: f64) -> Self {
        Self {
            lambda,
            gpe: f64::NAN,
            vde: f64::NAN,
            ffe: f64::NAN,
            mcd_db: f64::NAN,
            probe_accuracy: f64::NAN,
            seeds_done: 0,
            status: SweepStatus::Incomplete,
        }
    }

    fn from_runs(lambda: f64, reports: &[MetricReport], probes: &[f64], status: SweepStatus) -> Result<Self> {
        if reports.is_empty() {
            return Ok(Self { status, ..Self::pending(lambda) });
        }
        let m = average_reports(reports)?;
        Ok(Self {
            lambda,
            gpe: m.gpe,
            vde: m.vde,
            ffe: m.ffe,
            mcd_db: m.mcd_db,
            probe_accuracy: probes.iter().sum::<f64>() / probes.len() as f64,
            seeds_done: reports.len(),
            status,
        })
    }
}

pub fn write_sweep_report<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SWEEP_HEADER)?;
    let cell = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
    for r in rows {
        w.write_record([
            r.lambda.to_string(),
            cell(r.gpe),
            cell(r.vde),
            cell(r.ffe),
            cell(r.mcd_db),
            cell(r.probe_accuracy),
            r.status.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes through a temporary file so a reader never sees a half-written report.
pub fn save_sweep_report(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("csv.tmp");
    write_sweep_report(rows, std::fs::File::create(&tmp)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Objective metrics of one trained model over the evaluation set.
pub fn evaluate_model(synth: &Synthesizer, eval_set: &[SweepEvalItem], cfg: &EvalConfig) -> Result<MetricReport> {
    let mut reports = Vec::with_capacity(eval_set.len());
    for item in eval_set {
        let req = TransferRequest {
            text: item.text.clone(),
            reference_audio: item.audio.clone(),
            speaker: item.speaker,
            pitch_transform: None,
        };
        let out = synth.transfer(&req)?;
        reports.push(evaluate_pair(&item.audio, &out.waveform, cfg)?);
    }
    average_reports(&reports)
}

/// Trains one model per (λ, seed), evaluates it on `eval_set` and probes its prosody
/// embeddings for speaker identity. With `report`, the CSV is rewritten after every run;
/// a λ whose seeds have not all finished is marked incomplete.
pub fn lambda_sweep(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    sweep: &SweepConfig,
    data: &TrainingSet,
    eval_set: &[SweepEvalItem],
    eval_cfg: &EvalConfig,
    report: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    let lambdas = sweep.sorted_lambdas()?;
    if eval_set.is_empty() {
        return Err(Error::EmptyInput("sweep evaluation set"));
    }
    let labels: Vec<usize> = data.items.iter().map(|i| i.speaker as usize).collect();
    let mut rows: Vec<SweepRow> = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let mut reports = Vec::new();
        let mut probes = Vec::new();
        rows.push(SweepRow::pending(lambda));
        if let Some(path) = report {
            save_sweep_report(&rows, path)?;
        }
        for &seed in &sweep.seeds {
            let cfg = TrainConfig { lambda, seed, ..base.clone() };
            let run = (|| -> Result<(MetricReport, f64)> {
                let outcome = train(model_cfg, &cfg, data, None)?;
                let features = pooled_prosody_features(&outcome.model, &data.items)?;
                let probe = probe_accuracy(&features, &labels)?;
                let mut synth = Synthesizer::new(outcome.model, outcome.meta);
                synth.stft = eval_cfg.stft.clone();
                synth.f0 = eval_cfg.f0.clone();
                Ok((evaluate_model(&synth, eval_set, eval_cfg)?, probe))
            })();
            let (m, p) = match run {
                Ok(v) => v,
                Err(e) => {
                    if let Some(path) = report {
                        save_sweep_report(&rows, path)?;
                    }
                    return Err(e);
                }
            };
            tracing::info!(lambda, seed, ffe = m.ffe, mcd_db = m.mcd_db, probe = p, "sweep run finished");
            reports.push(m);
            probes.push(p);
            let status = if reports.len() == sweep.seeds.len() { SweepStatus::Complete } else { SweepStatus::Incomplete };
            *rows.last_mut().expect("row pushed above") = SweepRow::from_runs(lambda, &reports, &probes, status)?;
            if let Some(path) = report {
                save_sweep_report(&rows, path)?;
            }
        }
    }
    Ok(rows)
}
