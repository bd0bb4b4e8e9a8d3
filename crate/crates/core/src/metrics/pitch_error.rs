//! Frame-level F0 error rates: voicing decision error, gross pitch error and F0 frame error.

use crate::error::{Error, Result};
use crate::pitch::PitchContour;

/// Default relative deviation beyond which a both-voiced frame is a gross error.
pub const GPE_THRESHOLD: f64 = 0.2;

/// Raw error counts for one reference/estimate contour pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameErrorCounts {
    pub n_frames: usize,
    pub n_both_voiced: usize,
    pub n_voicing_errors: usize,
    pub n_gross_errors: usize,
}

impl FrameErrorCounts {
    pub fn vde(&self) -> f64 {
        ratio(self.n_voicing_errors, self.n_frames)
    }

    pub fn gpe(&self) -> f64 {
        ratio(self.n_gross_errors, self.n_both_voiced)
    }

    pub fn ffe(&self) -> f64 {
        ratio(self.n_voicing_errors + self.n_gross_errors, self.n_frames)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_lengths(reference: &PitchContour, estimate: &PitchContour) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::LengthMismatch { left: reference.len(), right: estimate.len() });
    }
    Ok(())
}

/// Counts voicing disagreements and gross errors in one pass.
pub fn frame_error_counts(reference: &PitchContour, estimate: &PitchContour, threshold: f64) -> Result<FrameErrorCounts> {
    check_lengths(reference, estimate)?;
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("GPE threshold must be positive, got {threshold}")));
    }
    let mut counts = FrameErrorCounts { n_frames: reference.len(), ..Default::default() };
    for t in 0..reference.len() {
        match (reference.voiced[t], estimate.voiced[t]) {
            (true, true) => {
                counts.n_both_voiced += 1;
                let r = reference.f0[t];
                if (estimate.f0[t] - r).abs() > threshold * r {
                    counts.n_gross_errors += 1;
                }
            }
            (false, false) => {}
            _ => counts.n_voicing_errors += 1,
        }
    }
    Ok(counts)
}

/// Fraction of frames whose voiced flags disagree.
pub fn voicing_decision_error(reference: &PitchContour, estimate: &PitchContour) -> Result<f64> {
    Ok(frame_error_counts(reference, estimate, GPE_THRESHOLD)?.vde())
}

/// Over frames voiced in both contours, the fraction with `|est - ref| > threshold * ref`.
/// Zero when no frame is voiced in both.
pub fn gross_pitch_error(reference: &PitchContour, estimate: &PitchContour, threshold: f64) -> Result<f64> {
    Ok(frame_error_counts(reference, estimate, threshold)?.gpe())
}

/// Voicing errors plus gross pitch errors, over all frames.
pub fn f0_frame_error(reference: &PitchContour, estimate: &PitchContour, threshold: f64) -> Result<f64> {
    Ok(frame_error_counts(reference, estimate, threshold)?.ffe())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;

    fn c(values: &[f64]) -> PitchContour {
        PitchContour::from_hz(values, 256, SAMPLE_RATE)
    }

    #[test]
    fn identical_contours_have_no_error() {
        let a = c(&[100.0, 0.0, 120.0, 130.0]);
        assert_eq!(voicing_decision_error(&a, &a).unwrap(), 0.0);
        assert_eq!(gross_pitch_error(&a, &a, 0.2).unwrap(), 0.0);
        assert_eq!(f0_frame_error(&a, &a, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn vde_counts_disagreements() {
        let r = c(&[100.0, 100.0, 0.0, 0.0]);
        let e = c(&[100.0, 0.0, 0.0, 100.0]);
        assert_eq!(voicing_decision_error(&r, &e).unwrap(), 0.5);
        let flipped = c(&[0.0, 0.0, 100.0, 100.0]);
        assert_eq!(voicing_decision_error(&r, &flipped).unwrap(), 1.0);
    }

    #[test]
    fn gpe_threshold_edges() {
        assert_eq!(gross_pitch_error(&c(&[100.0]), &c(&[125.0]), 0.2).unwrap(), 1.0);
        assert_eq!(gross_pitch_error(&c(&[100.0]), &c(&[115.0]), 0.2).unwrap(), 0.0);
    }

    #[test]
    fn ffe_combines_both_error_kinds() {
        // frame 0 voicing mismatch, frame 1 gross error, frames 2-3 fine / unvoiced
        let r = c(&[100.0, 100.0, 100.0, 0.0]);
        let e = c(&[0.0, 150.0, 101.0, 0.0]);
        let counts = frame_error_counts(&r, &e, 0.2).unwrap();
        assert_eq!(counts.n_both_voiced, 2);
        assert_eq!(f0_frame_error(&r, &e, 0.2).unwrap(), 0.5);
    }

    #[test]
    fn all_unvoiced_is_error_free() {
        let z = c(&[0.0; 6]);
        assert_eq!(f0_frame_error(&z, &z, 0.2).unwrap(), 0.0);
        assert_eq!(gross_pitch_error(&z, &z, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(
            voicing_decision_error(&c(&[1.0]), &c(&[1.0, 2.0])),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
