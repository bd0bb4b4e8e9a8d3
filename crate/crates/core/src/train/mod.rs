//! Optimization harness: step-decay Adam, length-bucketed batches, clipping, loss logging,
//! checkpoints, and the adversarial-weight sweep.

mod probe;
mod sweep;


use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use probe::{probe_accuracy, pooled_prosody_features};
pub use sweep::{
    evaluate_model, lambda_sweep, save_sweep_report, write_sweep_report, SweepConfig, SweepEvalItem, SweepRow, SweepStatus,
    SWEEP_HEADER,
};


use crate::corpus::{load_features, PreparedCorpus};
use crate::error::{Error, Result};
use crate::model::{compute_loss, save_checkpoint, CheckpointMeta, Example, ModelBatch, ModelConfig, Mode, PhonemeSequence, ProsodyModel, Vocabulary};
use crate::pitch::PitchContour;
use crate::spectral::{MelSpectrogram, StftConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// The learning rate halves every `decay_interval` steps.
    pub decay_interval: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub lambda: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    /// Steps after which the teacher-forced evaluation RMSE over the training set is recorded.
    pub eval_steps: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            decay_interval: 50_000,
            batch_size: 4,
            max_steps: 1_000,
            seed: 0,
            lambda: 0.0,
            checkpoint_interval: 0,
            grad_clip_norm: Some(1.0),
            eval_steps: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return Err(Error::InvalidConfig(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if self.decay_interval == 0 {
            return Err(Error::InvalidConfig("decay_interval must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig("grad_clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `initial_lr * 0.5^floor(step / decay_interval)`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (step / cfg.decay_interval.max(1)) as i32;
    cfg.initial_lr * 0.5f64.powi(halvings)
}

/// One utterance with its features, ready for batching.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub utt_id: String,
    pub text: PhonemeSequence,
    pub speaker: u32,
    pub mel: MelSpectrogram,
    pub f0: PitchContour,
}

impl TrainItem {
    pub fn example(&self) -> Example<'_> {
        Example { text: &self.text, speaker: self.speaker, mel: &self.mel, f0: &self.f0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub items: Vec<TrainItem>,
    pub vocabulary: Vocabulary,
    /// Speaker names in table order.
    pub speakers: Vec<String>,
}

impl TrainingSet {
    /// Loads cached features. The vocabulary and speaker table are derived from the records
    /// (sorted) unless given.
    pub fn from_prepared(
        prepared: &PreparedCorpus,
        stft: &StftConfig,
        vocabulary: Option<Vocabulary>,
        speakers: Option<Vec<String>>,
    ) -> Result<Self> {
        if prepared.items.is_empty() {
            return Err(Error::EmptyInput("training corpus"));
        }
        let vocabulary = match vocabulary {
            Some(v) => v,
            None => {
                let mut symbols: Vec<String> = prepared.items.iter().flat_map(|i| i.record.phonemes.clone()).collect();
                symbols.sort();
                symbols.dedup();
                Vocabulary::new(symbols)?
            }
        };
        let speakers = speakers.unwrap_or_else(|| {
            let mut s: Vec<String> = prepared.items.iter().map(|i| i.record.speaker_id.clone()).collect();
            s.sort();
            s.dedup();
            s
        });
        let index: BTreeMap<&str, u32> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect();
        let mut items = Vec::with_capacity(prepared.items.len());
        for p in &prepared.items {
            let (mel, f0) = load_features(p, stft)?;
            let speaker = *index
                .get(p.record.speaker_id.as_str())
                .ok_or_else(|| Error::UnknownSpeaker(p.record.speaker_id.clone()))?;
            items.push(TrainItem {
                utt_id: p.utt_id.clone(),
                text: vocabulary.encode(&p.record.phoneme_string())?,
                speaker,
                mel,
                f0,
            });
        }
        Ok(Self { items, vocabulary, speakers })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// A model configuration sized for this set's vocabulary, speakers and mel channels.
    pub fn fit_config(&self, mut cfg: ModelConfig) -> ModelConfig {
        cfg.n_symbols = self.vocabulary.len();
        cfg.n_speakers = self.speakers.len();
        if let Some(i) = self.items.first() {
            cfg.mel_channels = i.mel.n_channels;
        }
        cfg
    }
}

/// Sort-by-length bucketing: shuffle, sort windows of `batch_size * 4` by frame count,
/// cut into batches, then shuffle the batch order.
pub fn bucket_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for window in order.chunks(batch_size * 4) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| (lengths[i], i));
        batches.extend(w.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub rmse: f64,
    pub bce: f64,
    pub ce: f64,
}

pub const LOSS_HEADER: &str = "step,lr,total,rmse,bce,ce";

impl LossRow {
    fn csv_line(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.lr, self.total, self.rmse, self.bce, self.ce)
    }
}

pub struct TrainOutcome {
    pub model: ProsodyModel,
    pub meta: CheckpointMeta,
    pub log: Vec<LossRow>,
    /// `(step, teacher-forced RMSE)` for each requested evaluation step.
    pub eval_rmse: Vec<(usize, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Teacher-forced mel RMSE in evaluation mode, averaged over utterances.
pub fn evaluate_rmse(model: &ProsodyModel, items: &[TrainItem], batch_size: usize) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in items.chunks(batch_size.max(1)) {
        let examples: Vec<_> = chunk.iter().map(TrainItem::example).collect();
        let batch = ModelBatch::new(&examples, model.config(), model.dtype(), model.device())?;
        let out = model.forward(&batch, &mut Mode::Eval)?;
        let loss = compute_loss(&out, &batch.target_mel, &batch.frame_mask, &batch.gate_target, &batch.speakers, 0.0)?;
        sum += loss.values()?.1 * chunk.len() as f64;
    }
    Ok(sum / items.len() as f64)
}

/// Global L2 norm of all gradients present in `grads`.
pub fn gradient_norm(grads: &GradStore, params: &[Tensor]) -> Result<f64> {
    let mut sq = 0.0;
    for p in params {
        if let Some(g) = grads.get(p) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut GradStore, params: &[Tensor], max_norm: f64) -> Result<f64> {
    let norm = gradient_norm(grads, params)?;
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for p in params {
            if let Some(g) = grads.get(p) {
                let scaled = (g * scale)?;
                grads.insert(p, scaled);
            }
        }
    }
    Ok(norm)
}

/// Trains a freshly initialized model. With `out_dir`, the loss log is streamed to
/// `loss.csv` and checkpoints are written as `ckpt-<step>.safetensors`.
pub fn train(model_cfg: &ModelConfig, train_cfg: &TrainConfig, data: &TrainingSet, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    let mut cfg = data.fit_config(model_cfg.clone());
    cfg.lambda = train_cfg.lambda;
    let device = Device::Cpu;
    let model = ProsodyModel::new(cfg, train_cfg.seed, DType::F32, &device)?;
    let meta = CheckpointMeta { vocabulary: data.vocabulary.clone(), speakers: data.speakers.clone(), seed: train_cfg.seed, step: 0 };
    train_model(model, meta, train_cfg, data, out_dir)
}

/// Continues optimizing `model` (fresh optimizer state) for `train_cfg.max_steps` steps.
pub fn train_model(
    mut model: ProsodyModel,
    mut meta: CheckpointMeta,
    train_cfg: &TrainConfig,
    data: &TrainingSet,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    model.set_adversarial(train_cfg.lambda, model.config().reverse_speaker_gradient)?;
    let vars: Vec<_> = model.vars().into_iter().map(|(_, v)| v).collect();
    let params: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW { lr: train_cfg.initial_lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x5eed_ba7c);
    let lengths: Vec<usize> = data.items.iter().map(|i| i.mel.n_frames).collect();

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("loss.csv"))?);
            writeln!(f, "{LOSS_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut log = Vec::with_capacity(train_cfg.max_steps);
    let mut eval_rmse = Vec::new();
    let mut checkpoints = Vec::new();
    let start = meta.step;
    if train_cfg.eval_steps.contains(&start) {
        eval_rmse.push((start, evaluate_rmse(&model, &data.items, train_cfg.batch_size)?));
    }
    let mut queue: Vec<Vec<usize>> = Vec::new();
    for step in start + 1..=start + train_cfg.max_steps {
        if queue.is_empty() {
            queue = bucket_batches(&lengths, train_cfg.batch_size, &mut rng);
            queue.reverse();
        }
        let indices = queue.pop().expect("non-empty batch queue");
        let examples: Vec<_> = indices.iter().map(|&i| data.items[i].example()).collect();
        let batch = ModelBatch::new(&examples, model.config(), model.dtype(), model.device())?;
        let lr = lr_schedule(step - 1, train_cfg);
        opt.set_learning_rate(lr);
        let out = model.forward(&batch, &mut Mode::Train(&mut rng))?;
        let loss = compute_loss(&out, &batch.target_mel, &batch.frame_mask, &batch.gate_target, &batch.speakers, train_cfg.lambda)?;
        let (total, rmse, bce, ce) = loss.values()?;
        if ![total, rmse, bce, ce].iter().all(|v| v.is_finite()) {
            if let Some(f) = log_file.as_mut() {
                f.flush()?;
            }
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads = loss.total.backward()?;
        if let Some(max_norm) = train_cfg.grad_clip_norm {
            clip_gradients(&mut grads, &params, max_norm)?;
        }
        opt.step(&grads)?;
        let row = LossRow { step, lr, total, rmse, bce, ce };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", row.csv_line())?;
        }
        log.push(row);
        meta.step = step;
        if train_cfg.eval_steps.contains(&step) {
            eval_rmse.push((step, evaluate_rmse(&model, &data.items, train_cfg.batch_size)?));
        }
        let at_interval = train_cfg.checkpoint_interval > 0 && step % train_cfg.checkpoint_interval == 0;
        let last = step == start + train_cfg.max_steps;
        if let Some(dir) = out_dir {
            if at_interval || last {
                let path = dir.join(format!("ckpt-{step}.safetensors"));
                if !checkpoints.contains(&path) {
                    save_checkpoint(&path, &model, &meta)?;
                    checkpoints.push(path);
                }
            }
        }
        if step % 50 == 0 {
            tracing::debug!(step, total, rmse, bce, ce, "training");
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    Ok(TrainOutcome { model, meta, log, eval_rmse, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_at_interval_boundaries() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-3);
        assert_eq!(lr_schedule(49_999, &cfg), 1e-3);
        assert_eq!(lr_schedule(50_000, &cfg), 5e-4);
        assert_eq!(lr_schedule(100_000, &cfg), 2.5e-4);
        let mut prev = f64::INFINITY;
        for s in (0..400_000).step_by(997) {
            let lr = lr_schedule(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn buckets_cover_every_item_once() {
        let lengths = vec![5, 9, 3, 7, 7, 1, 2, 8, 4, 6];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = bucket_batches(&lengths, 3, &mut rng);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= 3));
    }

    #[test]
    fn clipping_never_increases_the_norm() {
        let dev = Device::Cpu;
        let a = candle_core::Var::new(&[3.0f32, 4.0], &dev).unwrap();
        let b = candle_core::Var::new(&[1.0f32], &dev).unwrap();
        let params = vec![a.as_tensor().clone(), b.as_tensor().clone()];
        for scale in [0.01f32, 1.0, 10.0] {
            let loss = ((a.as_tensor().sqr().unwrap().sum_all().unwrap() + b.as_tensor().sum_all().unwrap()).unwrap() * scale as f64).unwrap();
            let mut grads = loss.backward().unwrap();
            let before = gradient_norm(&grads, &params).unwrap();
            clip_gradients(&mut grads, &params, 1.0).unwrap();
            let after = gradient_norm(&grads, &params).unwrap();
            assert!(after <= before + 1e-9);
            assert!(after <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { initial_lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
