//! Training objective: mel RMSE + gate BCE + λ · speaker CE, averaged over the batch.

use candle_core::{DType, Tensor};

use super::layers::log_softmax_last;
use super::ModelOutput;
use crate::error::{Error, Result};

/// Scalar loss tensors. `rmse`, `bce` and `ce` are batch means; `total` carries the graph.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub rmse: Tensor,
    pub bce: Tensor,
    pub ce: Tensor,
}

impl LossTerms {
    /// `(total, rmse, bce, ce)` as host values.
    pub fn values(&self) -> Result<(f64, f64, f64, f64)> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok((v(&self.total)?, v(&self.rmse)?, v(&self.bce)?, v(&self.ce)?))
    }
}

/// Per-utterance RMSE over valid frames, `(batch,)`.
fn masked_rmse(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let c = pred.dim(2)? as f64;
    let sq = (pred - target)?.sqr()?.broadcast_mul(&mask.unsqueeze(2)?)?.sum((1, 2))?;
    let count = mask.sum(1)?.affine(c, 0.0)?;
    Ok(sq.div(&count)?.affine(1.0, 1e-16)?.sqrt()?)
}

/// Numerically stable binary cross-entropy from logits, averaged over valid frames per utterance.
fn masked_bce_with_logits(logits: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    // max(x, 0) - x * y + ln(1 + exp(-|x|))
    let per_frame = (logits.relu()? - (logits * target)?)?.add(&logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?;
    Ok(per_frame.mul(mask)?.sum(1)?.div(&mask.sum(1)?)?)
}

/// Computes the objective for one batch.
///
/// The mel term is the mean of the pre- and post-net RMSE per utterance. `frame_mask`
/// excludes padded frames from both the mel and gate terms.
pub fn compute_loss(
    out: &ModelOutput,
    target_mel: &Tensor,
    frame_mask: &Tensor,
    gate_target: &Tensor,
    speakers: &Tensor,
    lambda: f64,
) -> Result<LossTerms> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    if out.mel_post.dims() != target_mel.dims() {
        return Err(Error::InvalidArgument(format!(
            "prediction shape {:?} does not match target {:?}",
            out.mel_post.dims(),
            target_mel.dims()
        )));
    }
    let rmse_pre = masked_rmse(&out.mel_pre, target_mel, frame_mask)?;
    let rmse_post = masked_rmse(&out.mel_post, target_mel, frame_mask)?;
    let rmse = ((rmse_pre + rmse_post)? * 0.5)?.mean_all()?;
    let bce = masked_bce_with_logits(&out.gate_logits, gate_target, frame_mask)?.mean_all()?;
    let log_probs = log_softmax_last(&out.speaker_logits)?;
    let picked = log_probs.gather(&speakers.unsqueeze(1)?, 1)?.squeeze(1)?;
    let ce = picked.neg()?.mean_all()?;
    let total = ((&rmse + &bce)? + (&ce * lambda)?)?;
    Ok(LossTerms { total, rmse, bce, ce })
}
