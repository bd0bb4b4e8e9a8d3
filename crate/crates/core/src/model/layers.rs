//! Small building blocks shared by the encoders and the decoder.

use candle_core::{DType, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamBuilder};
use crate::error::Result;

/// Whether a forward pass is for training (dropout active) or evaluation.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout with a mask drawn from the training RNG; identity in evaluation.
pub fn dropout(x: &Tensor, p: f64, mode: &mut Mode<'_>) -> Result<Tensor> {
    match mode {
        Mode::Eval => Ok(x.clone()),
        Mode::Train(rng) => {
            if p <= 0.0 {
                return Ok(x.clone());
            }
            let keep = 1.0 - p;
            let n = x.elem_count();
            let mask: Vec<f32> = (0..n)
                .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
            Ok((x * mask)?)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[out_dim, in_dim], "weight", Init::XavierUniform)?,
            bias: Some(pb.get(&[out_dim], "bias", Init::Zeros)?),
        })
    }

    pub fn no_bias(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self { weight: pb.get(&[out_dim, in_dim], "weight", Init::XavierUniform)?, bias: None })
    }

    pub fn zeros(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[out_dim, in_dim], "weight", Init::Zeros)?,
            bias: Some(pb.get(&[out_dim], "bias", Init::Zeros)?),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }

    /// Applies the layer to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("non-scalar input");
        let flat = x.reshape(((), in_dim))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// 1-D convolution over `(batch, channels, time)` with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
    stride: usize,
}

impl Conv1d {
    pub fn new(pb: &ParamBuilder, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[out_ch, in_ch, kernel], "weight", Init::XavierUniform)?,
            bias: pb.get(&[out_ch], "bias", Init::Zeros)?,
            padding: (kernel - 1) / 2,
            stride,
        })
    }

    /// `x` is `(batch, in_channels, time)`. Computed as an unfold plus matmul, whose
    /// backward pass is exact for the kernel as well as the input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out_ch, in_ch, k) = self.weight.dims3()?;
        let (b, _, t) = x.dims3()?;
        let padded = x.pad_with_zeros(2, self.padding, self.padding)?;
        let full = t + 2 * self.padding + 1 - k;
        let taps: Vec<Tensor> = (0..k).map(|j| padded.narrow(2, j, full)).collect::<candle_core::Result<_>>()?;
        let cols = Tensor::stack(&taps, 2)?.reshape((b, in_ch * k, full))?;
        let cols = if self.stride > 1 {
            let keep: Vec<u32> = (0..full).step_by(self.stride).map(|i| i as u32).collect();
            let idx = Tensor::from_vec(keep, self.output_len(t), x.device())?;
            cols.index_select(&idx, 2)?
        } else {
            cols
        };
        let w = self.weight.reshape((out_ch, in_ch * k))?;
        let y = cols.transpose(1, 2)?.broadcast_matmul(&w.t()?)?.transpose(1, 2)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }

    /// Output length for an input of `len` frames.
    pub fn output_len(&self, len: usize) -> usize {
        let k = self.weight.dim(2).unwrap_or(1);
        (len + 2 * self.padding - k) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

/// LSTM cell with the input projection split out, so inputs known ahead of time can be
/// projected for all steps in one matrix product.
#[derive(Debug, Clone)]
pub struct LstmCell {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    hidden: usize,
}

impl LstmCell {
    pub fn new(pb: &ParamBuilder, in_dim: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: pb.get(&[4 * hidden, in_dim], "w_ih", Init::Uniform(bound))?,
            w_hh: pb.get(&[4 * hidden, hidden], "w_hh", Init::Uniform(bound))?,
            bias: pb.get(&[4 * hidden], "bias", Init::Uniform(bound))?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, batch: usize, like: &Tensor) -> Result<LstmState> {
        let z = Tensor::zeros((batch, self.hidden), like.dtype(), like.device())?;
        Ok(LstmState { h: z.clone(), c: z })
    }

    /// Projects the input columns `[start, start + width)` of `x` (last dim = width);
    /// the bias is added when `with_bias`.
    pub fn project_input(&self, x: &Tensor, start: usize, with_bias: bool) -> Result<Tensor> {
        let width = *x.dims().last().expect("non-scalar input");
        let w = self.w_ih.narrow(1, start, width)?;
        let dims = x.dims().to_vec();
        let mut y = x.reshape(((), width))?.matmul(&w.t()?)?;
        if with_bias {
            y = y.broadcast_add(&self.bias)?;
        }
        let mut out = dims;
        *out.last_mut().unwrap() = 4 * self.hidden;
        Ok(y.reshape(out)?)
    }

    /// One step given the already projected input gates `(batch, 4 * hidden)`.
    pub fn step(&self, gates_in: &Tensor, state: &LstmState) -> Result<LstmState> {
        let gates = (gates_in + state.h.matmul(&self.w_hh.t()?)?)?;
        let chunks = gates.chunk(4, 1)?;
        let i = candle_nn::ops::sigmoid(&chunks[0])?;
        let f = candle_nn::ops::sigmoid(&chunks[1])?;
        let g = chunks[2].tanh()?;
        let o = candle_nn::ops::sigmoid(&chunks[3])?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(LstmState { h, c })
    }

    /// Runs over a whole `(batch, time, in_dim)` sequence and returns `(batch, time, hidden)`.
    pub fn run(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let gates = self.project_input(x, 0, true)?;
        let mut state = self.zero_state(b, x)?;
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            state = self.step(&gates.narrow(1, step, 1)?.squeeze(1)?, &state)?;
            outs.push(state.h.clone());
        }
        Ok(Tensor::stack(&outs, 1)?)
    }
}

/// GRU cell; masked steps carry the previous state through unchanged.
#[derive(Debug, Clone)]
pub struct GruCell {
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    hidden: usize,
}

impl GruCell {
    pub fn new(pb: &ParamBuilder, in_dim: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: pb.get(&[3 * hidden, in_dim], "w_ih", Init::Uniform(bound))?,
            w_hh: pb.get(&[3 * hidden, hidden], "w_hh", Init::Uniform(bound))?,
            b_ih: pb.get(&[3 * hidden], "b_ih", Init::Uniform(bound))?,
            b_hh: pb.get(&[3 * hidden], "b_hh", Init::Uniform(bound))?,
            hidden,
        })
    }

    /// Final hidden state over `(batch, time, in_dim)`; `mask` is `(batch, time)` of 0/1.
    pub fn final_state(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let xi = x
            .reshape((b * t, d))?
            .matmul(&self.w_ih.t()?)?
            .broadcast_add(&self.b_ih)?
            .reshape((b, t, 3 * self.hidden))?;
        let mut h = Tensor::zeros((b, self.hidden), x.dtype(), x.device())?;
        for step in 0..t {
            let gi = xi.narrow(1, step, 1)?.squeeze(1)?.chunk(3, 1)?;
            let gh = h.matmul(&self.w_hh.t()?)?.broadcast_add(&self.b_hh)?.chunk(3, 1)?;
            let r = candle_nn::ops::sigmoid(&(&gi[0] + &gh[0])?)?;
            let z = candle_nn::ops::sigmoid(&(&gi[1] + &gh[1])?)?;
            let n = (&gi[2] + (r * &gh[2])?)?.tanh()?;
            let next = ((z.affine(-1.0, 1.0)? * n)? + (&z * &h)?)?;
            let m = mask.narrow(1, step, 1)?;
            h = (next.broadcast_mul(&m)? + h.broadcast_mul(&m.affine(-1.0, 1.0)?)?)?;
        }
        Ok(h)
    }
}

/// Mean over the time axis of `(batch, time, dim)` restricted to `mask == 1`.
pub fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(2)?;
    let sum = x.broadcast_mul(&m)?.sum(1)?;
    let count = mask.sum_keepdim(1)?.clamp(1.0, f64::INFINITY)?;
    Ok(sum.broadcast_div(&count)?)
}

/// Additive mask: 0 where `mask == 1`, a large negative number elsewhere.
pub fn mask_bias(mask: &Tensor) -> Result<Tensor> {
    Ok(mask.affine(1e9, -1e9)?)
}

/// Row-wise softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// `(batch, len)` 0/1 mask from per-item lengths.
pub fn length_mask(lengths: &[usize], max_len: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let data: Vec<f32> = lengths
        .iter()
        .flat_map(|&l| (0..max_len).map(move |i| if i < l { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (lengths.len(), max_len), device)?.to_dtype(dtype)?)
}

/// Log-softmax along the last dimension.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, D::Minus1)?)
}
