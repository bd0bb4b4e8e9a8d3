use candle_core::DType;

use super::TrainItem;
use crate::error::{Error, Result};
use crate::model::{masked_mean, ProsodyModel, Reference};

const L2: f64 = 1e-2;
const ITERATIONS: usize = 400;
const STEP: f64 = 0.5;

/// Mean-pooled prosody embedding r of each item, computed from its own reference.
pub fn pooled_prosody_features(model: &ProsodyModel, items: &[TrainItem]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let reference = if model.variant().uses_pitch_encoder() {
            Reference::from_contours(&[&item.f0], model.config().f0_reference_hz, model.dtype(), model.device())?
        } else {
            Reference::from_mels(&[&item.mel], model.dtype(), model.device())?
        };
        let r = model.encode_prosody(&reference)?;
        let pooled = masked_mean(&r.vectors, &r.mask)?.squeeze(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        out.push(pooled);
    }
    Ok(out)
}

fn standardize(train: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let d = train[0].len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for x in train {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for x in train {
        for j in 0..d {
            std[j] += (x[j] - mean[j]).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt().max(1e-8);
    }
    (mean, std)
}

/// Multinomial logistic regression with an L2 penalty, fit by full-batch gradient descent.
/// Returns `(weights[class][feature], bias[class])`.
fn fit_logistic(x: &[Vec<f64>], y: &[usize], n_classes: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut w = vec![vec![0.0; d]; n_classes];
    let mut b = vec![0.0; n_classes];
    for _ in 0..ITERATIONS {
        let mut gw = vec![vec![0.0; d]; n_classes];
        let mut gb = vec![0.0; n_classes];
        for (xi, &yi) in x.iter().zip(y) {
            let p = softmax(&logits(&w, &b, xi));
            for k in 0..n_classes {
                let e = p[k] - if k == yi { 1.0 } else { 0.0 };
                gb[k] += e / n;
                for j in 0..d {
                    gw[k][j] += e * xi[j] / n;
                }
            }
        }
        for k in 0..n_classes {
            b[k] -= STEP * gb[k];
            for j in 0..d {
                w[k][j] -= STEP * (gw[k][j] + L2 * w[k][j]);
            }
        }
    }
    (w, b)
}

fn logits(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter().zip(b).map(|(wk, bk)| bk + wk.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Leave-one-out accuracy of a fresh logistic-regression speaker probe on frozen features.
pub fn probe_accuracy(features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch { left: features.len(), right: labels.len() });
    }
    if features.len() < 2 {
        return Err(Error::InvalidArgument("the probe needs at least two examples".into()));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut correct = 0usize;
    for held in 0..features.len() {
        let train: Vec<&[f64]> = (0..features.len()).filter(|&i| i != held).map(|i| features[i].as_slice()).collect();
        let (mean, std) = standardize(&train);
        let norm = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect() };
        let xs: Vec<Vec<f64>> = train.iter().map(|x| norm(x)).collect();
        let ys: Vec<usize> = (0..labels.len()).filter(|&i| i != held).map(|i| labels[i]).collect();
        let (w, b) = fit_logistic(&xs, &ys, n_classes);
        let z = logits(&w, &b, &norm(&features[held]));
        let pred = z.iter().enumerate().fold(0, |best, (k, v)| if *v > z[best] { k } else { best });
        if pred == labels[held] {
            correct += 1;
        }
    }
    Ok(correct as f64 / features.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_clusters_are_recovered() {
        let mut f = Vec::new();
        let mut y = Vec::new();
        for c in 0..3 {
            for i in 0..5 {
                f.push(vec![c as f64 * 3.0 + 0.1 * i as f64, -(c as f64) + 0.05 * i as f64]);
                y.push(c);
            }
        }
        assert_eq!(probe_accuracy(&f, &y).unwrap(), 1.0);
    }

    #[test]
    fn constant_features_fall_back_to_chance() {
        let f = vec![vec![1.0, 1.0]; 8];
        let y = vec![0, 1, 0, 1, 0, 1, 0, 1];
        assert!(probe_accuracy(&f, &y).unwrap() <= 0.5);
    }
}
