//! Mel cepstra and DTW-aligned mel-cepstral distortion.

use std::f64::consts::{LN_10, PI};

use crate::error::{Error, Result};
use crate::spectral::MelSpectrogram;

/// Default number of cepstral coefficients kept for distortion (0th excluded).
pub const DEFAULT_MCEP_COEFFS: usize = 13;

/// Cepstral coefficients `1..=D` per frame, row-major `n_frames × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct McepSequence {
    pub data: Vec<f64>,
    pub n_frames: usize,
    pub dim: usize,
}

impl McepSequence {
    pub fn new(data: Vec<f64>, n_frames: usize, dim: usize) -> Result<Self> {
        if data.len() != n_frames * dim {
            return Err(Error::DimensionMismatch { left: data.len(), right: n_frames * dim });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("cepstral coefficients must be finite".into()));
        }
        Ok(Self { data, n_frames, dim })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// Orthonormal DCT-II of each log-mel frame, keeping coefficients `1..=n_coeffs`.
pub fn mel_cepstrum(mel: &MelSpectrogram, n_coeffs: usize) -> Result<McepSequence> {
    let n = mel.n_channels;
    if n_coeffs == 0 || n_coeffs > n {
        return Err(Error::InvalidArgument(format!(
            "n_coeffs must be in 1..={n}, got {n_coeffs}"
        )));
    }
    let scale = (2.0 / n as f64).sqrt();
    let basis: Vec<Vec<f64>> = (1..=n_coeffs)
        .map(|k| {
            (0..n)
                .map(|i| scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(mel.n_frames * n_coeffs);
    for frame in mel.frames() {
        for row in &basis {
            data.push(row.iter().zip(frame).map(|(b, &x)| b * x as f64).sum());
        }
    }
    Ok(McepSequence { data, n_frames: mel.n_frames, dim: n_coeffs })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Result of a dynamic-time-warping alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Matched `(reference, estimate)` frame pairs from start to end.
    pub path: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Unconstrained DTW with steps (1,0), (0,1), (1,1) and Euclidean local cost.
/// Ties prefer the diagonal, then the reference-advancing step.
pub fn dtw_align(reference: &McepSequence, estimate: &McepSequence) -> Result<Alignment> {
    if reference.n_frames == 0 || estimate.n_frames == 0 {
        return Err(Error::EmptyInput("cepstral sequence"));
    }
    if reference.dim != estimate.dim {
        return Err(Error::DimensionMismatch { left: reference.dim, right: estimate.dim });
    }
    let (n, m) = (reference.n_frames, estimate.n_frames);
    let mut acc = vec![f64::INFINITY; n * m];
    let idx = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let local = euclidean(reference.frame(i), estimate.frame(j));
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[idx(i - 1, j - 1)] } else { f64::INFINITY };
                let up = if i > 0 { acc[idx(i - 1, j)] } else { f64::INFINITY };
                let left = if j > 0 { acc[idx(i, j - 1)] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[idx(i, j)] = prev + local;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[idx(i - 1, j - 1)] } else { f64::INFINITY };
        let up = if i > 0 { acc[idx(i - 1, j)] } else { f64::INFINITY };
        let left = if j > 0 { acc[idx(i, j - 1)] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(Alignment { path, total_cost: acc[idx(n - 1, m - 1)] })
}

/// `(10 / ln 10) * sqrt(2 * sum_d (a_d - b_d)^2)` for one frame pair.
pub fn frame_distortion_db(a: &[f64], b: &[f64]) -> f64 {
    (10.0 / LN_10) * (2.0f64).sqrt() * euclidean(a, b)
}

/// Mean per-frame distortion (dB) along the DTW alignment path.
pub fn mel_cepstral_distortion(reference: &McepSequence, estimate: &McepSequence) -> Result<f64> {
    let alignment = dtw_align(reference, estimate)?;
    Ok(distortion_along(reference, estimate, &alignment.path))
}

pub(crate) fn distortion_along(reference: &McepSequence, estimate: &McepSequence, path: &[(usize, usize)]) -> f64 {
    let sum: f64 = path
        .iter()
        .map(|&(i, j)| frame_distortion_db(reference.frame(i), estimate.frame(j)))
        .sum();
    sum / path.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mel(frames: &[&[f32]]) -> MelSpectrogram {
        let c = frames[0].len();
        MelSpectrogram::new(frames.concat(), frames.len(), c, 256, 22_050).unwrap()
    }

    #[test]
    fn constant_frame_has_zero_cepstrum() {
        let m = mel(&[&[3.0; 8]]);
        let c = mel_cepstrum(&m, 7).unwrap();
        assert!(c.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn matches_explicit_dct() {
        let m = mel(&[&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]]);
        let c = mel_cepstrum(&m, 3).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        for k in 1..=3 {
            let mut s = 0.0;
            for (i, xi) in x.iter().enumerate() {
                s += xi * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / 8.0).cos();
            }
            let expected = (2.0f64 / 4.0).sqrt() * s;
            assert!((c.frame(0)[k - 1] - expected).abs() < 1e-12);
        }
        assert_eq!(c.frame(0), c.frame(1));
    }

    #[test]
    fn coefficient_count_is_validated() {
        let m = mel(&[&[1.0, 2.0]]);
        assert!(mel_cepstrum(&m, 0).is_err());
        assert!(mel_cepstrum(&m, 3).is_err());
    }

    #[test]
    fn single_frame_closed_form() {
        let a = McepSequence::new(vec![0.0], 1, 1).unwrap();
        let b = McepSequence::new(vec![0.3], 1, 1).unwrap();
        let d = mel_cepstral_distortion(&a, &b).unwrap();
        // (10 / ln 10) * sqrt(2) * 0.3
        assert!((d - 1.842_555_439).abs() < 1e-8, "{d}");
    }

    #[test]
    fn self_distortion_is_exactly_zero() {
        let a = McepSequence::new(vec![0.1, -0.4, 2.0, 0.3, 0.3, 0.3], 3, 2).unwrap();
        assert_eq!(mel_cepstral_distortion(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn errors_on_empty_or_mismatched() {
        let a = McepSequence::new(vec![], 0, 2).unwrap();
        let b = McepSequence::new(vec![1.0, 2.0], 1, 2).unwrap();
        let c = McepSequence::new(vec![1.0], 1, 1).unwrap();
        assert!(matches!(mel_cepstral_distortion(&a, &b), Err(Error::EmptyInput(_))));
        assert!(matches!(mel_cepstral_distortion(&b, &c), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn path_is_monotone_and_complete() {
        let a = McepSequence::new((0..5).map(|i| i as f64).collect(), 5, 1).unwrap();
        let b = McepSequence::new(vec![0.0, 2.0, 4.0], 3, 1).unwrap();
        let al = dtw_align(&a, &b).unwrap();
        assert_eq!(al.path.first(), Some(&(0, 0)));
        assert_eq!(al.path.last(), Some(&(4, 2)));
        for w in al.path.windows(2) {
            let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            assert!(di <= 1 && dj <= 1 && di + dj >= 1);
        }
    }
}
