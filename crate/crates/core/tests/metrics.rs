mod common;

use common::*;
use prosody_core::audio::{Waveform, SAMPLE_RATE};
use prosody_core::metrics::*;
use prosody_core::pitch::PitchContour;
use prosody_core::spectral::MelSpectrogram;
use rand::Rng;

fn sequence(frames: &[Vec<f64>]) -> McepSequence {
    let dim = frames[0].len();
    McepSequence::new(frames.concat(), frames.len(), dim).unwrap()
}

#[test]
fn frame_errors_match_brute_force_counts() {
    let mut rng = rng(11);
    for _ in 0..1000 {
        let len = rng.random_range(1..=64);
        let reference = random_contour(&mut rng, len);
        let estimate = perturbed(&mut rng, &reference);
        let oracle = brute_counts(&reference, &estimate, GPE_THRESHOLD);
        let c = frame_error_counts(&reference, &estimate, GPE_THRESHOLD).unwrap();
        assert!((c.vde() - oracle.vde()).abs() < 1e-9);
        assert!((c.gpe() - oracle.gpe()).abs() < 1e-9);
        assert!((c.ffe() - oracle.ffe()).abs() < 1e-9);
        assert_eq!(c.n_voicing_errors + c.n_gross_errors, oracle.voicing + oracle.gross);
        assert_eq!(c.n_both_voiced, oracle.both);
    }
}

#[test]
fn ffe_decomposes_into_vde_and_gpe() {
    let mut rng = rng(12);
    for _ in 0..1000 {
        let len = rng.random_range(1..=64);
        let reference = random_contour(&mut rng, len);
        let estimate = perturbed(&mut rng, &reference);
        let c = frame_error_counts(&reference, &estimate, GPE_THRESHOLD).unwrap();
        let report = MetricReport::from_counts(c, 0.0);
        assert!(report.decomposition_holds());
        let lhs = (c.ffe() * c.n_frames as f64).round() as usize;
        let rhs = (c.vde() * c.n_frames as f64).round() as usize + (c.gpe() * c.n_both_voiced as f64).round() as usize;
        assert_eq!(lhs, rhs);
    }
}

#[test]
fn hand_counted_examples() {
    let c = |v: &[f64]| PitchContour::from_hz(v, 256, SAMPLE_RATE);
    assert_eq!(voicing_decision_error(&c(&[100.0, 100.0, 0.0, 0.0]), &c(&[100.0, 0.0, 0.0, 100.0])).unwrap(), 0.5);
    assert_eq!(gross_pitch_error(&c(&[100.0]), &c(&[125.0]), 0.2).unwrap(), 1.0);
    assert_eq!(gross_pitch_error(&c(&[100.0]), &c(&[115.0]), 0.2).unwrap(), 0.0);
    // one voicing mismatch, one gross error among two both-voiced frames
    let r = c(&[100.0, 100.0, 100.0, 0.0]);
    let e = c(&[0.0, 150.0, 105.0, 0.0]);
    assert_eq!(f0_frame_error(&r, &e, 0.2).unwrap(), 0.5);
}

#[test]
fn dtw_oracle_agrees_with_exhaustive_search() {
    // Exhaustive enumeration of monotone paths on tiny grids checks the oracle itself.
    fn all_paths(i: usize, j: usize, n: usize, m: usize, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        cur.push((i, j));
        if i == n - 1 && j == m - 1 {
            out.push(cur.clone());
        } else {
            if i + 1 < n && j + 1 < m {
                all_paths(i + 1, j + 1, n, m, cur, out);
            }
            if i + 1 < n {
                all_paths(i + 1, j, n, m, cur, out);
            }
            if j + 1 < m {
                all_paths(i, j + 1, n, m, cur, out);
            }
        }
        cur.pop();
    }
    let mut rng = rng(13);
    for _ in 0..30 {
        let (n, m) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let a = random_frames(&mut rng, n, 3);
        let b = random_frames(&mut rng, m, 3);
        let mut paths = Vec::new();
        all_paths(0, 0, n, m, &mut Vec::new(), &mut paths);
        let dist = |i: usize, j: usize| a[i].iter().zip(&b[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let best = paths.iter().map(|p| p.iter().map(|&(i, j)| dist(i, j)).sum::<f64>()).fold(f64::INFINITY, f64::min);
        let (total, _) = brute_dtw_mcd(&a, &b);
        assert!((total - best).abs() < 1e-12);
        let alignment = dtw_align(&sequence(&a), &sequence(&b)).unwrap();
        assert!((alignment.total_cost - best).abs() < 1e-9);
    }
}

#[test]
fn dtw_mcd_matches_brute_force_program() {
    let mut rng = rng(14);
    for k in 0..200 {
        let (n, m) = if k == 0 { (3, 5) } else { (rng.random_range(1..=16), rng.random_range(1..=16)) };
        let dim = rng.random_range(1..=13);
        let a = random_frames(&mut rng, n, dim);
        let b = random_frames(&mut rng, m, dim);
        let (total, oracle) = brute_dtw_mcd(&a, &b);
        let alignment = dtw_align(&sequence(&a), &sequence(&b)).unwrap();
        assert!((alignment.total_cost - total).abs() < 1e-9);
        let mcd = mel_cepstral_distortion(&sequence(&a), &sequence(&b)).unwrap();
        assert!((mcd - oracle).abs() < 1e-9, "pair {k}: {mcd} vs {oracle}");
    }
}

#[test]
fn single_frame_distortion_closed_form() {
    let a = McepSequence::new(vec![0.0], 1, 1).unwrap();
    let b = McepSequence::new(vec![0.3], 1, 1).unwrap();
    let expected = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt() * 0.3;
    assert!((mel_cepstral_distortion(&a, &b).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 1.8428).abs() < 1e-3);
}

#[test]
fn cepstrum_matches_explicit_dct() {
    let mel = MelSpectrogram::new(vec![1.0, 2.0, 3.0, 4.0], 1, 4, 256, SAMPLE_RATE).unwrap();
    let c = mel_cepstrum(&mel, 3).unwrap();
    let n = 4.0;
    for k in 1..=3 {
        let direct: f64 = (0..4)
            .map(|i| (2.0 / n as f64).sqrt() * (i as f64 + 1.0) * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
            .sum();
        assert!((c.frame(0)[k - 1] - direct).abs() < 1e-9);
    }
}

#[test]
fn scaled_tone_is_a_gross_error_everywhere() {
    let cfg = EvalConfig::default();
    let reference = tone(150.0, 1.0, 0.5);
    let estimate = tone(225.0, 1.0, 0.5);
    let report = evaluate_pair(&reference, &estimate, &cfg).unwrap();
    assert!(report.n_both_voiced > 0);
    assert_eq!(report.gpe, 1.0);
    assert!(report.decomposition_holds());

    let silent = Waveform::silence(22_050, SAMPLE_RATE);
    let report = evaluate_pair(&silent, &silent, &cfg).unwrap();
    assert_eq!((report.gpe, report.vde, report.ffe), (0.0, 0.0, 0.0));
}
