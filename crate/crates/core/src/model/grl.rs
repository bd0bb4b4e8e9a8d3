//! Gradient reversal: identity forward, negated gradient backward.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

struct GradientReversal;

impl CustomOp1 for GradientReversal {
    fn name(&self) -> &'static str {
        "gradient-reversal"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("gradient reversal expects a contiguous tensor".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].to_vec()),
            _ => return Err(candle_core::Error::Msg("gradient reversal supports f32 and f64 only".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.neg()?))
    }
}

/// Returns `x` unchanged; during backpropagation the gradient flowing into `x` is negated.
pub fn gradient_reversal(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GradientReversal)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn forward_is_identity() {
        let x = Tensor::new(&[[1.5f32, -2.0], [0.0, 3.25]], &Device::Cpu).unwrap();
        let y = gradient_reversal(&x).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), x.to_vec2::<f32>().unwrap());
        let t = gradient_reversal(&x.t().unwrap()).unwrap();
        assert_eq!(t.to_vec2::<f32>().unwrap(), x.t().unwrap().to_vec2::<f32>().unwrap());
    }

    #[test]
    fn backward_negates() {
        let x = Var::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap();
        let plain = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let reversed = gradient_reversal(x.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap();
        let g1 = plain.backward().unwrap().get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let g2 = reversed.backward().unwrap().get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*a, -*b);
        }
    }
}
