mod common;

use common::*;
use prosody_core::corpus::{SyntheticCorpusSpec, SyntheticSpeaker};
use prosody_core::metrics::EvalConfig;
use prosody_core::model::*;
use prosody_core::train::*;
use prosody_core::Error;

fn one_each(dir: &std::path::Path) -> ToyCorpus {
    toy_corpus(dir, &SyntheticCorpusSpec { utterances_per_speaker: 1, ..Default::default() })
}

#[test]
fn training_is_deterministic_and_checkpoints_reload() {
    let dir = tempfile::tempdir().unwrap();
    let c = one_each(dir.path());
    let mc = ModelConfig { variant: Variant::Hard, ..Default::default() };
    let tc = TrainConfig { max_steps: 4, seed: 9, checkpoint_interval: 2, ..Default::default() };
    let a = train(&mc, &tc, &c.data, Some(&dir.path().join("a"))).unwrap();
    let b = train(&mc, &tc, &c.data, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 4);
    assert_eq!(a.checkpoints.len(), 2);
    let log = std::fs::read_to_string(dir.path().join("a/loss.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), LOSS_HEADER);
    assert_eq!(log.lines().count(), 5);

    let loaded = load_checkpoint(&a.checkpoints[1], &Device::Cpu).unwrap();
    assert_eq!(loaded.meta.step, 4);
    let after = evaluate_rmse(&loaded.model, &c.data.items, 4).unwrap();
    assert_eq!(after, evaluate_rmse(&a.model, &c.data.items, 4).unwrap());
}

#[test]
fn diverging_runs_stop_with_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = one_each(dir.path());
    let tc = TrainConfig { max_steps: 30, initial_lr: 1e30, grad_clip_norm: None, ..Default::default() };
    let err = train(&ModelConfig::default(), &tc, &c.data, None).err().expect("training must diverge");
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
}

#[test]
fn zeroing_the_f0_input_changes_hard_output() {
    let dir = tempfile::tempdir().unwrap();
    let c = one_each(dir.path());
    let out = quick_train(&c.data, Variant::Hard, 60);
    let item = &c.data.items[0];
    let silent = prosody_core::pitch::PitchContour::from_hz(&vec![0.0; item.f0.len()], 256, 22_050);
    let req = InferenceRequest { text: &item.text, speaker: item.speaker, reference_mel: Some(&item.mel), reference_f0: None, decoder_f0: Some(&item.f0) };
    let with = out.model.infer(&req).unwrap().mel_post;
    let without = out.model.infer(&InferenceRequest { decoder_f0: Some(&silent), ..req }).unwrap().mel_post;
    let diff = (with - without).unwrap().abs().unwrap().mean_all().unwrap().to_scalar::<f32>().unwrap();
    assert!(diff > 0.0);
}

#[test]
fn two_speakers_are_identifiable_without_reversal() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticCorpusSpec {
        speakers: vec![
            SyntheticSpeaker { id: "low".into(), f0_min_hz: 100.0, f0_max_hz: 140.0 },
            SyntheticSpeaker { id: "high".into(), f0_min_hz: 220.0, f0_max_hz: 280.0 },
        ],
        utterances_per_speaker: 4,
        ..Default::default()
    };
    let c = toy_corpus(dir.path(), &spec);
    let out = quick_train(&c.data, Variant::Soft, 150);
    let features = pooled_prosody_features(&out.model, &c.data.items).unwrap();
    let labels: Vec<usize> = c.data.items.iter().map(|i| i.speaker as usize).collect();
    let accuracy = probe_accuracy(&features, &labels).unwrap();
    assert!(accuracy > 0.9, "{accuracy}");
}

#[test]
fn sweep_rows_and_aborted_runs() {
    let dir = tempfile::tempdir().unwrap();
    let c = one_each(dir.path());
    let base = TrainConfig { max_steps: 2, ..Default::default() };
    let mc = ModelConfig { variant: Variant::Gst, ..Default::default() };
    let eval_cfg = EvalConfig::default();
    let item = &c.data.items[0];
    let good = SweepEvalItem { utt_id: item.utt_id.clone(), text: item.text.clone(), speaker: item.speaker, audio: c.audio(&item.utt_id) };

    let report = dir.path().join("one.csv");
    let sweep = SweepConfig { lambdas: vec![0.0], seeds: vec![0] };
    let rows = lambda_sweep(&mc, &base, &sweep, &c.data, std::slice::from_ref(&good), &eval_cfg, Some(&report)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].status, SweepStatus::Complete);
    let text = std::fs::read_to_string(&report).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    for col in ["gpe", "vde", "ffe", "mcd_db"] {
        assert!(header.contains(&col));
    }
    assert_eq!(text.lines().count(), 2);

    let bad = SweepEvalItem { speaker: 99, ..good.clone() };
    let report = dir.path().join("aborted.csv");
    let sweep = SweepConfig { lambdas: vec![0.2, 0.0], seeds: vec![0] };
    let err = lambda_sweep(&mc, &base, &sweep, &c.data, &[good, bad], &eval_cfg, Some(&report));
    assert!(err.is_err());
    let text = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1], "0,,,,,,incomplete");
}
