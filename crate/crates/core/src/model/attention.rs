//! Location-sensitive additive attention.

use candle_core::Tensor;

use super::layers::{mask_bias, softmax_last, Conv1d, Linear};
use super::params::ParamBuilder;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct LocationAttention {
    query: Linear,
    memory: Linear,
    location_conv: Conv1d,
    location: Linear,
    v: Linear,
}

/// Attention memory with its key projection and padding bias computed once per utterance.
#[derive(Debug, Clone)]
pub struct AttentionMemory {
    pub values: Tensor,
    keys: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionState {
    pub weights: Tensor,
    cumulative: Tensor,
}

impl LocationAttention {
    pub fn new(
        pb: &ParamBuilder,
        query_dim: usize,
        memory_dim: usize,
        attention_dim: usize,
        filters: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::no_bias(&pb.pp("query"), query_dim, attention_dim)?,
            memory: Linear::no_bias(&pb.pp("memory"), memory_dim, attention_dim)?,
            location_conv: Conv1d::new(&pb.pp("location_conv"), 2, filters, kernel, 1)?,
            location: Linear::no_bias(&pb.pp("location"), filters, attention_dim)?,
            v: Linear::no_bias(&pb.pp("v"), attention_dim, 1)?,
        })
    }

    /// `memory` is `(batch, len, dim)`, `mask` is `(batch, len)` of 0/1.
    pub fn prepare(&self, memory: &Tensor, mask: &Tensor) -> Result<AttentionMemory> {
        Ok(AttentionMemory { values: memory.clone(), keys: self.memory.forward(memory)?, bias: mask_bias(mask)? })
    }

    pub fn initial_state(&self, memory: &AttentionMemory) -> Result<AttentionState> {
        let (b, n, _) = memory.values.dims3()?;
        let z = Tensor::zeros((b, n), memory.values.dtype(), memory.values.device())?;
        Ok(AttentionState { weights: z.clone(), cumulative: z })
    }

    /// One decoder step. Returns the context `(batch, dim)` and the updated state whose
    /// `weights` are the new alignment `(batch, len)`.
    pub fn step(&self, query: &Tensor, memory: &AttentionMemory, state: &AttentionState) -> Result<(Tensor, AttentionState)> {
        let loc_in = Tensor::stack(&[&state.weights, &state.cumulative], 1)?;
        let loc = self.location.forward(&self.location_conv.forward(&loc_in)?.transpose(1, 2)?)?;
        let q = self.query.forward(query)?.unsqueeze(1)?;
        let hidden = memory.keys.broadcast_add(&q)?.add(&loc)?.tanh()?;
        let energies = self.v.forward(&hidden)?.squeeze(2)?.add(&memory.bias)?;
        let weights = softmax_last(&energies)?;
        let context = weights.unsqueeze(1)?.matmul(&memory.values)?.squeeze(1)?;
        let cumulative = (&state.cumulative + &weights)?;
        Ok((context, AttentionState { weights, cumulative }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::length_mask;
    use candle_core::{DType, Device};

    #[test]
    fn rows_are_stochastic_and_padding_gets_no_weight() {
        let pb = ParamBuilder::seeded(3, DType::F32, &Device::Cpu);
        let att = LocationAttention::new(&pb, 6, 4, 5, 3, 5).unwrap();
        let memory = Tensor::randn(0f32, 1.0, (2, 7, 4), &Device::Cpu).unwrap();
        let mask = length_mask(&[7, 4], 7, DType::F32, &Device::Cpu).unwrap();
        let mem = att.prepare(&memory, &mask).unwrap();
        let mut state = att.initial_state(&mem).unwrap();
        for _ in 0..3 {
            let q = Tensor::randn(0f32, 1.0, (2, 6), &Device::Cpu).unwrap();
            let (_, s) = att.step(&q, &mem, &state).unwrap();
            state = s;
            let w = state.weights.to_vec2::<f32>().unwrap();
            for row in &w {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
            assert!(w[1][4..].iter().all(|&x| x == 0.0));
        }
    }
}
