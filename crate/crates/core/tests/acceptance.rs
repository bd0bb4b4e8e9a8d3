//! End-to-end acceptance checks. Runs without the libtest harness and prints one
//! `criterion N: PASS|FAIL` line per check.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use common::*;
use prosody_core::corpus::SyntheticCorpusSpec;
use prosody_core::metrics::*;
use prosody_core::model::*;
use prosody_core::pipeline::*;
use prosody_core::pitch::{extract_f0, F0Config};
use prosody_core::train::*;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(d) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {d}"),
        Err(d) => println!("criterion {n} ({name}): FAIL [{secs:.1}s] {d}"),
    }
    result.is_ok()
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    for k in 0..1000 {
        let len = r.random_range(1..=64);
        let reference = random_contour(&mut r, len);
        let estimate = perturbed(&mut r, &reference);
        let o = brute_counts(&reference, &estimate, GPE_THRESHOLD);
        let c = frame_error_counts(&reference, &estimate, GPE_THRESHOLD).map_err(|e| e.to_string())?;
        if (c.vde() - o.vde()).abs() > 1e-9 || (c.gpe() - o.gpe()).abs() > 1e-9 || (c.ffe() - o.ffe()).abs() > 1e-9 {
            return Err(format!("contour pair {k} disagrees with the brute-force count"));
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (n, m, dim) = (r.random_range(1..=16), r.random_range(1..=16), r.random_range(1..=13));
        let a = random_frames(&mut r, n, dim);
        let b = random_frames(&mut r, m, dim);
        let seq = |f: &[Vec<f64>]| McepSequence::new(f.concat(), f.len(), dim).unwrap();
        let mcd = mel_cepstral_distortion(&seq(&a), &seq(&b)).map_err(|e| e.to_string())?;
        worst = worst.max((mcd - brute_dtw_mcd(&a, &b).1).abs());
    }
    let elapsed = start.elapsed();
    ensure(
        worst <= 1e-9 && elapsed < Duration::from_secs(30),
        format!("1000 contour pairs exact, 200 DTW pairs max |diff| {worst:.1e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn ffe_decomposition() -> Outcome {
    let mut r = rng(102);
    for k in 0..1000 {
        let len = r.random_range(1..=64);
        let reference = random_contour(&mut r, len);
        let estimate = perturbed(&mut r, &reference);
        let c = frame_error_counts(&reference, &estimate, GPE_THRESHOLD).map_err(|e| e.to_string())?;
        let ffe = (c.ffe() * c.n_frames as f64).round() as usize;
        let vde = (c.vde() * c.n_frames as f64).round() as usize;
        let gpe = (c.gpe() * c.n_both_voiced as f64).round() as usize;
        if ffe != vde + gpe {
            return Err(format!("pair {k}: {ffe} != {vde} + {gpe}"));
        }
    }
    Ok("1000 pairs".into())
}

fn f0_accuracy() -> Outcome {
    let start = Instant::now();
    let cfg = F0Config::default();
    let mut details = Vec::new();
    let mut ok = true;
    for freq in [110.0, 160.0, 220.0, 300.0, 400.0] {
        let median = extract_f0(&tone(freq, 1.0, 0.5), &cfg).map_err(|e| e.to_string())?.median_voiced().unwrap_or(0.0);
        ok &= (median / freq - 1.0).abs() < 0.02;
        details.push(format!("{freq}->{median:.1}"));
    }
    let silence = extract_f0(&prosody_core::audio::Waveform::silence(22_050, 22_050), &cfg).map_err(|e| e.to_string())?;
    ok &= silence.n_voiced() == 0 && start.elapsed() < Duration::from_secs(10);
    ensure(ok, format!("{}; silence voiced frames {}", details.join(" "), silence.n_voiced()))
}

fn grl_gradient() -> Outcome {
    let dev = Device::Cpu;
    let mut r = rng(104);
    let w1 = Tensor::from_vec((0..20).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>(), (5, 4), &dev).unwrap();
    let w2 = Tensor::from_vec((0..15).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>(), (3, 5), &dev).unwrap();
    let x0: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
    let f = |x: &Tensor, reverse: bool| {
        let h = w1.matmul(&x.unsqueeze(1).unwrap()).unwrap().tanh().unwrap();
        let h = if reverse { gradient_reversal(&h).unwrap() } else { h };
        w2.matmul(&h).unwrap().tanh().unwrap().sqr().unwrap().sum_all().unwrap()
    };
    let grad = |reverse: bool| {
        let x = Var::new(x0.as_slice(), &dev).unwrap();
        f(x.as_tensor(), reverse).backward().unwrap().get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap()
    };
    let (rev, plain) = (grad(true), grad(false));
    let h = 1e-3;
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        if rev[i] != -plain[i] {
            return Err(format!("component {i}: reversed {} vs plain {}", rev[i], plain[i]));
        }
        let at = |d: f64| {
            let mut x = x0.clone();
            x[i] += d;
            f(&Tensor::new(x.as_slice(), &dev).unwrap(), false).to_scalar::<f64>().unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        worst = worst.max((-rev[i] - fd).abs() / fd.abs().max(1e-12));
    }
    ensure(worst < 1e-4, format!("max relative error {worst:.2e}"))
}

fn loss_arithmetic() -> Outcome {
    let dev = Device::Cpu;
    let t = |v: Tensor| v;
    let out = ModelOutput {
        mel_pre: t(Tensor::ones((1, 2, 2), DType::F64, &dev).unwrap()),
        mel_post: t(Tensor::ones((1, 2, 2), DType::F64, &dev).unwrap()),
        gate_logits: Tensor::zeros((1, 2), DType::F64, &dev).unwrap(),
        text_attention: Tensor::ones((1, 2, 1), DType::F64, &dev).unwrap(),
        prosody_attention: None,
        prosody: ProsodyEmbedding {
            vectors: Tensor::zeros((1, 1, 1), DType::F64, &dev).unwrap(),
            mask: Tensor::ones((1, 1), DType::F64, &dev).unwrap(),
            token_weights: None,
        },
        speaker_logits: Tensor::zeros((1, 4), DType::F64, &dev).unwrap(),
    };
    let target = Tensor::zeros((1, 2, 2), DType::F64, &dev).unwrap();
    let mask = Tensor::ones((1, 2), DType::F64, &dev).unwrap();
    let gate = Tensor::new(&[[0.0f64, 1.0]], &dev).unwrap();
    let spk = Tensor::new(&[1u32], &dev).unwrap();
    let (total, rmse, bce, ce) = compute_loss(&out, &target, &mask, &gate, &spk, 1.0).and_then(|l| l.values()).map_err(|e| e.to_string())?;
    let expected = 1.0 + 0.6931 + 1.3863;
    ensure(
        (total - expected).abs() < 1e-4 && (total - (1.0 + 2f64.ln() + 4f64.ln())).abs() < 1e-6,
        format!("rmse {rmse} bce {bce:.6} ce {ce:.6} total {total:.6}"),
    )
}

fn lr_schedule_check() -> Outcome {
    let cfg = TrainConfig::default();
    let v = [lr_schedule(0, &cfg), lr_schedule(50_000, &cfg), lr_schedule(100_000, &cfg)];
    ensure(v == [1e-3, 5e-4, 2.5e-4], format!("{v:?}"))
}

fn train_toy(data: &TrainingSet, variant: Variant, steps: usize, seed: u64) -> TrainOutcome {
    let mc = ModelConfig { variant, ..Default::default() };
    let tc = TrainConfig { max_steps: steps, seed, eval_steps: vec![10, steps], ..Default::default() };
    train(&mc, &tc, data, None).unwrap()
}

fn overfit(small: &TrainingSet, hard: &mut Option<TrainOutcome>, soft: &mut Option<TrainOutcome>) -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for (variant, slot) in [(Variant::Hard, hard), (Variant::Soft, soft)] {
        let start = Instant::now();
        let out = train_toy(small, variant, 500, 0);
        let (at10, at500) = (out.eval_rmse[0].1, out.eval_rmse[1].1);
        let secs = start.elapsed().as_secs_f64();
        ok &= at500 < 0.5 * at10 && secs < 600.0;
        details.push(format!("{variant}: {at10:.3} -> {at500:.3} ({:.0}%, {secs:.0}s)", 100.0 * at500 / at10));
        *slot = Some(out);
    }
    ensure(ok, details.join("; "))
}

fn synthesizer(outcome: &TrainOutcome) -> Synthesizer {
    let model = ProsodyModel::from_tensors(
        outcome.model.config().clone(),
        outcome.model.vars().into_iter().map(|(k, v)| (k, v.as_tensor().clone())).collect(),
        outcome.model.dtype(),
        &Device::Cpu,
    )
    .unwrap();
    Synthesizer::new(model, outcome.meta.clone())
}

fn request(c: &ToyCorpus, utt: &str, transform: Option<PitchTransform>) -> TransferRequest {
    let item = &c.data.items[c.index(utt)];
    TransferRequest { text: item.text.clone(), reference_audio: c.audio(utt), speaker: item.speaker, pitch_transform: transform }
}

fn transferability(small: &ToyCorpus, hard: &TrainOutcome) -> Outcome {
    let s = synthesizer(hard);
    let mut ffes = Vec::new();
    for item in &small.data.items {
        let out = s.transfer(&request(small, &item.utt_id, None)).map_err(|e| e.to_string())?;
        ffes.push(f0_frame_error(&out.reference_f0, &out.output_f0, GPE_THRESHOLD).map_err(|e| e.to_string())?);
    }
    let mean = ffes.iter().sum::<f64>() / ffes.len() as f64;
    let each: Vec<String> = ffes.iter().map(|f| format!("{f:.3}")).collect();
    ensure(mean < 0.15, format!("mean FFE {mean:.3} over {} references [{}]", ffes.len(), each.join(" ")))
}

fn median_ratio(s: &Synthesizer, c: &ToyCorpus, utt: &str) -> Result<(f64, f64, f64), String> {
    let base = s.transfer(&request(c, utt, None)).map_err(|e| e.to_string())?;
    let half = s.transfer(&request(c, utt, Some(PitchTransform::Scale { factor: 0.5 }))).map_err(|e| e.to_string())?;
    let b = base.output_f0.median_voiced().ok_or("unscaled output is unvoiced")?;
    let h = half.output_f0.median_voiced().ok_or("scaled output is unvoiced")?;
    Ok((b, h, h / b))
}

fn scalability(varied: &ToyCorpus) -> Outcome {
    const REFERENCE: &str = "spk3_000";
    let hard = synthesizer(&train_toy(&varied.data, Variant::Hard, 1500, 0));
    let (hb, hh, hr) = median_ratio(&hard, varied, REFERENCE)?;
    let soft = synthesizer(&train_toy(&varied.data, Variant::Soft, 3000, 0));
    let (sb, sh, sr) = median_ratio(&soft, varied, REFERENCE)?;
    ensure(
        (0.35..=0.65).contains(&hr) && sr < 1.0,
        format!("hard {hb:.1} -> {hh:.1} Hz (ratio {hr:.3}); soft {sb:.1} -> {sh:.1} Hz (ratio {sr:.3})"),
    )
}

fn disentanglement(probe: &ToyCorpus) -> Outcome {
    let mc = ModelConfig { variant: Variant::Soft, ..Default::default() };
    let base = TrainConfig { max_steps: 1000, ..Default::default() };
    let sweep = SweepConfig { lambdas: vec![0.0, 2.0], seeds: vec![0, 1, 2] };
    let mut seen = std::collections::BTreeSet::new();
    let eval_set: Vec<SweepEvalItem> = probe
        .data
        .items
        .iter()
        .filter(|i| seen.insert(i.speaker))
        .map(|i| SweepEvalItem { utt_id: i.utt_id.clone(), text: i.text.clone(), speaker: i.speaker, audio: probe.audio(&i.utt_id) })
        .collect();
    let rows = lambda_sweep(&mc, &base, &sweep, &probe.data, &eval_set, &EvalConfig::default(), None).map_err(|e| e.to_string())?;
    let (at0, at2) = (&rows[0], &rows[1]);
    ensure(
        at2.probe_accuracy <= at0.probe_accuracy && rows.iter().all(|r| r.status == SweepStatus::Complete),
        format!(
            "probe accuracy λ=0 {:.3}, λ=2 {:.3} (FFE {:.3} / {:.3}, MCD {:.2} / {:.2} dB)",
            at0.probe_accuracy, at2.probe_accuracy, at0.ffe, at2.ffe, at0.mcd_db, at2.mcd_db
        ),
    )
}

fn structural(small: &ToyCorpus, models: &[&TrainOutcome]) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut checked = 0usize;
    for p in &small.prepared.items {
        let (mel, f0) = prosody_core::corpus::load_features(p, &prosody_core::spectral::StftConfig::default()).map_err(|e| e.to_string())?;
        if mel.n_frames != f0.len() || mel.n_frames != p.n_frames {
            return Err(format!("{}: mel {} frames, f0 {}", p.utt_id, mel.n_frames, f0.len()));
        }
    }
    let stochastic = |rows: &[Vec<f32>], what: &str| -> Result<(), String> {
        for (t, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().map(|&w| w as f64).sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&w| w < 0.0) {
                return Err(format!("{what} row {t} sums to {sum}"));
            }
        }
        Ok(())
    };
    for outcome in models {
        let model = &outcome.model;
        let variant = model.variant();
        let examples: Vec<_> = small.data.items.iter().map(TrainItem::example).collect();
        let batch = ModelBatch::new(&examples, model.config(), model.dtype(), model.device()).map_err(|e| e.to_string())?;
        let out = model.forward(&batch, &mut Mode::Eval).map_err(|e| e.to_string())?;
        for (b, &len) in batch.frame_lengths.iter().enumerate() {
            let rows: Vec<Vec<f32>> = out.text_attention.get(b).unwrap().narrow(0, 0, len).unwrap().to_vec2().unwrap();
            stochastic(&rows, &format!("{variant} teacher-forced text attention"))?;
            if let Some(pa) = &out.prosody_attention {
                let rows: Vec<Vec<f32>> = pa.get(b).unwrap().narrow(0, 0, len).unwrap().to_vec2().unwrap();
                stochastic(&rows, &format!("{variant} prosody attention"))?;
            }
            checked += 1;
        }
        if out.n_frames() != batch.target_mel.dim(1).unwrap() {
            return Err(format!("{variant}: teacher-forced output has {} frames", out.n_frames()));
        }
        if let Some(w) = &out.prosody.token_weights {
            let w: Vec<Vec<Vec<f32>>> = w.to_vec3().unwrap();
            for per_item in &w {
                stochastic(per_item, &format!("{variant} token weights"))?;
            }
        }

        let s = synthesizer(outcome);
        let result = s.transfer(&request(small, &small.data.items[0].utt_id, None)).map_err(|e| e.to_string())?;
        stochastic(&result.text_attention, "free-running text attention")?;
        if let Some(p) = &result.prosody_attention {
            stochastic(p, "free-running prosody attention")?;
        }
        if let Some(tw) = &result.token_weights {
            stochastic(tw, "free-running token weights")?;
        }
        if result.output_f0.len() != result.mel.n_frames {
            return Err(format!("{variant}: output f0 {} vs mel {}", result.output_f0.len(), result.mel.n_frames));
        }

        let path = dir.path().join(format!("{variant}.safetensors"));
        save_checkpoint(&path, model, &outcome.meta).map_err(|e| e.to_string())?;
        let loaded = load_checkpoint(&path, &Device::Cpu).map_err(|e| e.to_string())?;
        let again = loaded.model.forward(&batch, &mut Mode::Eval).map_err(|e| e.to_string())?;
        let bits = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap().into_iter().map(f32::to_bits).collect::<Vec<_>>();
        if bits(&out.mel_post) != bits(&again.mel_post) || bits(&out.gate_logits) != bits(&again.gate_logits) {
            return Err(format!("{variant}: reloaded checkpoint differs"));
        }
    }
    Ok(format!("{} models, {checked} teacher-forced items, features of {} utterances", models.len(), small.prepared.items.len()))
}

fn non_parallel(small: &ToyCorpus, soft: &TrainOutcome, gst: &TrainOutcome) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let vocab = &small.data.vocabulary;
    let symbols: Vec<&str> = vocab.symbols().iter().map(String::as_str).filter(|s| !s.starts_with('<')).take(3).collect();
    let text = vocab.encode(&symbols.join(" ")).map_err(|e| e.to_string())?;
    let mut details = Vec::new();
    for outcome in [soft, gst] {
        let s = synthesizer(outcome);
        let reference = &small.data.items[1];
        if reference.text.len() == text.len() {
            return Err("target text must differ in length from the reference".into());
        }
        let req = TransferRequest { text: text.clone(), ..request(small, &reference.utt_id, None) };
        let result = s.transfer(&req).map_err(|e| e.to_string())?;
        let out = dir.path().join(outcome.model.variant().name());
        write_bundle(&result, &out).map_err(|e| e.to_string())?;
        check_bundle(&out)?;
        details.push(format!("{}: {} symbols vs {} in reference, {} frames", outcome.model.variant(), text.len(), reference.text.len(), result.mel.n_frames));
    }
    Ok(details.join("; "))
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let small = toy_corpus(&dir.path().join("small"), &SyntheticCorpusSpec { utterances_per_speaker: 1, ..Default::default() });
    let mut passed = Vec::new();
    passed.push(run(1, "metric oracles", metric_oracles));
    passed.push(run(2, "FFE decomposition", ffe_decomposition));
    passed.push(run(3, "F0 accuracy", f0_accuracy));
    passed.push(run(4, "gradient reversal", grl_gradient));
    passed.push(run(5, "loss arithmetic", loss_arithmetic));
    passed.push(run(6, "learning-rate schedule", lr_schedule_check));
    let (mut hard, mut soft) = (None, None);
    passed.push(run(7, "toy overfit", || overfit(&small.data, &mut hard, &mut soft)));
    passed.push(run(8, "pitch transferability", || transferability(&small, hard.as_ref().ok_or("no hard model")?)));
    passed.push(run(9, "pitch scalability", || {
        let spec = SyntheticCorpusSpec { utterances_per_speaker: 1, pitch_variants: 6, ..Default::default() };
        scalability(&toy_corpus(&dir.path().join("varied"), &spec))
    }));
    passed.push(run(10, "disentanglement trend", || {
        let spec = SyntheticCorpusSpec { utterances_per_speaker: 3, ..Default::default() };
        disentanglement(&toy_corpus(&dir.path().join("probe"), &spec))
    }));
    let gst = train_toy(&small.data, Variant::Gst, 200, 0);
    passed.push(run(11, "structural invariants", || {
        let hard = hard.as_ref().ok_or("no hard model")?;
        let soft = soft.as_ref().ok_or("no soft model")?;
        structural(&small, &[hard, soft, &gst])
    }));
    passed.push(run(12, "non-parallel transfer", || non_parallel(&small, soft.as_ref().ok_or("no soft model")?, &gst)));
    let n_pass = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {n_pass}/{} criteria passed", passed.len());
    if n_pass != passed.len() {
        std::process::exit(1);
    }
}
